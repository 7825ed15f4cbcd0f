"""Spatial pipeline: coupled invariantized Euler-Lagrange pair after
multiplier elimination, six-component structured conservation law,
canonicalization of the constant vector onto the z-axis, two first
integrals, the elimination-ideal identity, cylindrical reconstruction by
quadratures, and recovery of the rigid motion.

Writing E, F for the variational derivatives of L in kappa and tau and
lambda for the arc-length multiplier, the two residuals solved as ODEs are

  e_y = D^2 E + (2 tau/kappa) D^2 F + (tau_s/kappa - 2 tau kappa_s/kappa^2) D F
        + (kappa^2 - tau^2) E + lambda kappa
  e_z = -(1/kappa) D^3 F + (2 kappa_s/kappa^2) D^2 F
        + (kappa_ss/kappa^2 + tau^2/kappa - 2 kappa_s^2/kappa^3 - kappa) D F
        - kappa_s F + 2 tau D E + tau_s E

and the conservation law is  M(z) v = c  with M the 6x6 block matrix of
:func:`sevar.geometry.adjoint_se3` and

  v = (tau F - kappa E - lambda,
       -D E - (tau/kappa) D F,
       (1/kappa) D^2 F - (kappa_s/kappa^2) D F + kappa F - tau E,
       F,
       -(1/kappa) D F,
       E).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .errors import (
    CurvatureCollapseError,
    DegenerateC1Error,
    DegenerateCurvatureError,
    InconsistentInitialJetError,
    InconsistentPoseError,
    MissingJetOrderError,
    NegativeRadiusSquaredError,
    NotArcLengthError,
    SevarError,
    SingularHighestDerivativeSystemError,
    StepUnderflowError,
    StiffnessFailureError,
    UpsilonOneVanishesError,
)
from .geometry import (
    CurveJet,
    D_SIGNS,
    adjoint_group_se3,
    adjoint_se3,
    frenet_curve_se3,
)
from .laws import ConservedVector
from .ode import SolveOptions, integrate_ivp, newton_solve
from .se2 import PipelineResult, Reconstruction, _stencil_derivative

KAPPA_FLOOR = 1e-8

_K = ex.jet("kappa", 0)
_KS = ex.jet("kappa", 1)
_KSS = ex.jet("kappa", 2)
_T = ex.jet("tau", 0)
_TS = ex.jet("tau", 1)


# ---------------------------------------------------------------------------
# Symbolic derivation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Se3Derivation:
    lagrangian: ex.JetExpression
    e_kappa: ex.JetExpression
    e_tau: ex.JetExpression
    lam: ex.JetExpression
    e_y: ex.JetExpression
    e_z: ex.JetExpression
    upsilon: tuple
    first_integral_1: ex.JetExpression
    first_integral_2: ex.JetExpression
    kappa_top: int
    tau_top: int


def derive_el_se3(lagrangian):
    """Derive the symbolic spatial pipeline from L(kappa, ..., tau, ...)."""
    L = ex.parse_lagrangian(lagrangian) if isinstance(lagrangian, str) else ex.simplify(lagrangian)
    e_k = ex.euler_operator(L, "kappa")
    e_t = ex.euler_operator(L, "tau")
    lam = ex.lambda_se3(L)
    d_ek = ex.d_s(e_k)
    d2_ek = ex.d_s(d_ek)
    d_et = ex.d_s(e_t)
    d2_et = ex.d_s(d_et)
    d3_et = ex.d_s(d2_et)

    e_y = ex.simplify(
        d2_ek
        + 2 * _T / _K * d2_et
        + (_TS / _K - 2 * _T * _KS / _K**2) * d_et
        + (_K**2 - _T**2) * e_k
        + lam * _K
    )
    e_z = ex.simplify(
        -1 * d3_et / _K
        + 2 * _KS / _K**2 * d2_et
        + (_KSS / _K**2 + _T**2 / _K - 2 * _KS**2 / _K**3 - _K) * d_et
        - _KS * e_t
        + 2 * _T * d_ek
        + _TS * e_k
    )
    upsilon = (
        ex.simplify(_T * e_t - _K * e_k - lam),
        ex.simplify(-1 * d_ek - _T / _K * d_et),
        ex.simplify(d2_et / _K - _KS / _K**2 * d_et + _K * e_t - _T * e_k),
        e_t,
        ex.simplify(-1 * d_et / _K),
        e_k,
    )
    f1 = ex.simplify(upsilon[0] ** 2 + upsilon[1] ** 2 + upsilon[2] ** 2)
    f2 = ex.simplify(
        upsilon[0] * upsilon[3] - upsilon[1] * upsilon[4] + upsilon[2] * upsilon[5]
    )
    return Se3Derivation(
        lagrangian=L,
        e_kappa=e_k,
        e_tau=e_t,
        lam=lam,
        e_y=e_y,
        e_z=e_z,
        upsilon=upsilon,
        first_integral_1=f1,
        first_integral_2=f2,
        kappa_top=max(ex.max_order(e_y, "kappa"), ex.max_order(e_z, "kappa")),
        tau_top=max(ex.max_order(e_y, "tau"), ex.max_order(e_z, "tau")),
    )


def conservation_vector_se3(derivation, jet):
    """Numeric six-vector of invariants; needs kappa above the floor when a
    component divides by it."""
    _check_kappa(derivation, jet)
    return np.array([ex.evaluate(u, jet) for u in derivation.upsilon])


def first_integrals_se3(derivation, jet):
    """(F1, F2) = (|c1|^2, c1^T D c2) evaluated through the invariants."""
    _check_kappa(derivation, jet)
    return (
        ex.evaluate(derivation.first_integral_1, jet),
        ex.evaluate(derivation.first_integral_2, jet),
    )


def _divides_by_kappa(e):
    if isinstance(e, ex.Pow):
        if isinstance(e.base, ex.JetVar) and e.base.family == "kappa" and e.exponent < 0:
            return True
        return _divides_by_kappa(e.base)
    if isinstance(e, ex.Add):
        return any(_divides_by_kappa(t) for t in e.terms)
    if isinstance(e, ex.Mul):
        return any(_divides_by_kappa(f) for f in e.factors)
    if isinstance(e, ex.Call):
        return _divides_by_kappa(e.arg)
    return False


def _check_kappa(derivation, jet):
    if jet.value("kappa", 0) <= 1e-12 and any(
        _divides_by_kappa(u) for u in derivation.upsilon
    ):
        raise DegenerateCurvatureError(
            "invariant components divide by kappa, which is below tolerance"
        )


# ---------------------------------------------------------------------------
# Coupled curvature/torsion solve
# ---------------------------------------------------------------------------

@dataclass
class Se3Solution:
    derivation: Se3Derivation
    traj: object
    span: tuple
    kappa_dim: int
    tau_dim: int
    _top_fn: object = field(repr=False, default=None)
    drift: dict = field(default_factory=dict)

    def split(self, state):
        state = np.atleast_1d(state)
        return state[: self.kappa_dim], state[self.kappa_dim:]

    def jet_at(self, s):
        k, t = self.split(self.traj.state_at(s))
        return ex.InvariantJet(tuple(k), tuple(t), float(s))

    def kappa_of_s(self, s):
        return float(np.atleast_1d(self.traj.state_at(s))[0])

    def tau_of_s(self, s):
        if self.tau_dim == 0:
            return 0.0
        return float(np.atleast_1d(self.traj.state_at(s))[self.kappa_dim])

    def sample(self, n=None):
        s0, s1 = self.span
        return np.linspace(s0, s1, n or 801)


def _pair_solver(derivation, kappa_dim, tau_dim):
    """f(kappa_state, tau_state) -> (kappa_top, tau_top) from the residual
    pair, by warm-started 2x2 Newton."""
    K, T = derivation.kappa_top, derivation.tau_top
    ey = ex.compile_expression(derivation.e_y)
    ez = ex.compile_expression(derivation.e_z)
    jyk = ex.compile_expression(ex.partial_jet(derivation.e_y, "kappa", K))
    jyt = ex.compile_expression(ex.partial_jet(derivation.e_y, "tau", T))
    jzk = ex.compile_expression(ex.partial_jet(derivation.e_z, "kappa", K))
    jzt = ex.compile_expression(ex.partial_jet(derivation.e_z, "tau", T))
    cell = {"guess": np.zeros(2)}

    def tops(kstate, tstate):
        def jets(v):
            k = tuple(kstate) + (0.0,) * (K - kappa_dim) + (v[0],)
            t = tuple(tstate) + (0.0,) * (T - tau_dim) + (v[1],)
            return k, t

        def residual(v):
            k, t = jets(v)
            return np.array([ey(k, t), ez(k, t)])

        def jac(v):
            k, t = jets(v)
            return np.array([[jyk(k, t), jyt(k, t)], [jzk(k, t), jzt(k, t)]])

        root = newton_solve(residual, cell["guess"], jacobian=jac, tol=1e-12)
        cell["guess"] = root.copy()
        return root

    return tops


def solve_se3(derivation, jet0, span, opts=None):
    """Integrate the coupled residual pair for (kappa(s), tau(s)).

    The state carries kappa derivatives up to ``kappa_top - 1`` and tau
    derivatives up to ``tau_top - 1``; each step solves the pair for the
    two highest derivatives. A terminal guard halts integration when
    kappa falls below the positivity floor and raises
    CurvatureCollapseError carrying the partial solution.
    """
    opts = opts or SolveOptions()
    d = derivation
    K, T = d.kappa_top, d.tau_top
    kin = list(jet0.kappa_derivs)
    tin = list(jet0.tau_derivs)

    if ex.is_zero(d.e_y) and ex.is_zero(d.e_z):
        raise SingularHighestDerivativeSystemError(
            "both Euler-Lagrange residuals vanish identically"
        )
    if K <= 0 and T <= 0:
        return _solve_algebraic(d, kin, tin, span, opts)
    if K <= 0 or T <= 0:
        raise SingularHighestDerivativeSystemError(
            f"cannot extract highest derivatives (kappa order {K}, tau order {T})"
        )
    if len(kin) < K or len(tin) < T:
        raise MissingJetOrderError(
            f"initial jet must provide {K} kappa and {T} tau derivatives"
        )
    if kin[0] <= KAPPA_FLOOR:
        raise CurvatureCollapseError(
            f"initial curvature {kin[0]:.3e} is at or below the floor {KAPPA_FLOOR}"
        )

    tops = _pair_solver(d, K, T)
    try:
        tops(kin[:K], tin[:T])
    except SevarError as exc:
        raise SingularHighestDerivativeSystemError(
            f"highest-derivative system could not be solved at the initial jet: {exc}"
        ) from exc

    def rhs(s, y):
        k, t = y[:K], y[K:]
        top = tops(k, t)
        dk = np.append(k[1:], top[0])
        dt = np.append(t[1:], top[1])
        return np.concatenate([dk, dt])

    def floor_event(s, y):
        return y[0] - KAPPA_FLOOR

    floor_event.terminal = True
    floor_event.direction = -1

    try:
        traj = integrate_ivp(rhs, kin[:K] + tin[:T], span, opts.rel_tol, opts.abs_tol,
                             max_step=opts.max_step, events=(floor_event,))
    except StepUnderflowError as exc:
        raise StiffnessFailureError(f"curvature/torsion solve failed: {exc}") from exc

    sol = Se3Solution(d, traj, (traj.s[0], traj.s[-1]), K, T, _top_fn=tops)
    if traj.meta.get("terminated_by_event"):
        raise CurvatureCollapseError(
            f"curvature reached the floor {KAPPA_FLOOR} at s = {traj.s[-1]:.6g}",
            partial=sol,
        )
    _record_se3_drift(sol, opts)
    return sol


def _solve_algebraic(d, kin, tin, span, opts):
    """Both residuals are algebraic: only constant invariants qualify."""
    kin = kin or [0.0]
    tin = tin or [0.0]
    jet = ex.InvariantJet((kin[0],), (tin[0],))
    try:
        ry = ex.evaluate(d.e_y, jet)
        rz = ex.evaluate(d.e_z, jet)
    except SevarError:
        ry = rz = math.inf
    if max(abs(ry), abs(rz)) <= 1e-9:
        if kin[0] <= KAPPA_FLOOR:
            raise CurvatureCollapseError(
                "the algebraic Euler-Lagrange constraints hold only at zero curvature"
            )
        traj = integrate_ivp(lambda s, y: [0.0, 0.0], [kin[0], tin[0]], span,
                             opts.rel_tol, opts.abs_tol)
        sol = Se3Solution(d, traj, tuple(span), 1, 1)
        _record_se3_drift(sol, opts)
        return sol
    zero_jet = ex.InvariantJet((0.0,), (tin[0],))
    try:
        forces_zero = (
            abs(ex.evaluate(d.e_y, zero_jet)) <= 1e-12
            and abs(ex.evaluate(d.e_z, zero_jet)) <= 1e-12
        )
    except SevarError:
        forces_zero = False
    if forces_zero:
        raise CurvatureCollapseError(
            "Euler-Lagrange constraints force zero curvature, below the positivity floor"
        )
    raise InconsistentInitialJetError(
        f"algebraic EL constraints violated at the initial jet "
        f"(residuals {ry:.3e}, {rz:.3e})"
    )


def _record_se3_drift(sol, opts):
    d = sol.derivation
    grid = sol.sample(min(opts.n_sample, 401))
    f1 = np.empty(len(grid))
    f2 = np.empty(len(grid))
    fn1 = ex.compile_expression(d.first_integral_1)
    fn2 = ex.compile_expression(d.first_integral_2)
    for i, s in enumerate(grid):
        jet = sol.jet_at(s)
        f1[i] = fn1(jet.kappa_derivs, jet.tau_derivs)
        f2[i] = fn2(jet.kappa_derivs, jet.tau_derivs)
    for name, series in (("first_integral_1", f1), ("first_integral_2", f2)):
        drift = float(np.max(np.abs(series - series[0])))
        sol.drift[name] = {
            "initial": float(series[0]),
            "max_abs_drift": drift,
            "rel_drift": drift / max(abs(series[0]), 1e-300),
        }
        sol.traj.channels[name] = series


# ---------------------------------------------------------------------------
# Constant-vector canonicalization and rigid-motion recovery
# ---------------------------------------------------------------------------

def _rotation_to_z(c1_hat):
    """Minimal proper rotation R with R e3 = c1_hat."""
    e3 = np.array([0.0, 0.0, 1.0])
    c = float(np.dot(e3, c1_hat))
    if c >= 1.0 - 1e-14:
        return np.eye(3)
    if c <= -1.0 + 1e-14:
        return np.diag([1.0, -1.0, -1.0])  # pi about the x-axis
    axis = np.cross(e3, c1_hat)
    s = np.linalg.norm(axis)
    axis = axis / s
    Kx = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + s * Kx + (1.0 - c) * (Kx @ Kx)


def _angles_from_rotation(R):
    """(alpha, beta, gamma) in the parametrization of geometry.rotation_se3."""
    beta = math.asin(max(-1.0, min(1.0, R[2, 0])))
    if abs(math.cos(beta)) > 1e-12:
        alpha = math.atan2(R[2, 1], R[2, 2])
        gamma = math.atan2(R[1, 0], R[0, 0])
    else:
        gamma = 0.0
        alpha = math.atan2(-R[0, 1], -R[0, 2]) if R[2, 0] > 0 else math.atan2(R[0, 1], R[0, 2])
    return alpha, beta, gamma


@dataclass(frozen=True)
class CanonicalConstants:
    """Constant vector c, its invariants, the canonical form C aligned with
    the z-axis, and the rigid motion mapping C back to c."""

    constants: ConservedVector
    canonical: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    angles: tuple

    @property
    def c1_norm(self):
        return self.constants.c1_norm

    @property
    def c1_d_c2(self):
        return self.constants.c1_d_c2

    def adjoint(self):
        return adjoint_group_se3(self.rotation, self.translation)


def canonicalize_constants(c):
    """Map c to C = (0, 0, |c1|, 0, 0, c1^T D c2 / |c1|) and build a group
    element g with Ad(g) C = c.

    The rotation takes the z-axis to c1 (identity when they are already
    parallel); the translation is the minimal solution of t x c1 =
    D c2 - (c1^T D c2/|c1|^2) c1. Raises DegenerateC1Error for |c1| ~ 0.
    """
    vec = c.c if isinstance(c, ConservedVector) else np.asarray(c, dtype=float)
    c = ConservedVector(vec)
    if len(vec) != 6:
        raise ValueError("canonicalization applies to six-component vectors")
    n1 = c.c1_norm
    if n1 <= 1e-12:
        raise DegenerateC1Error(f"|c1| = {n1:.3e} is numerically zero")
    kq = c.c1_d_c2
    C = np.array([0.0, 0.0, n1, 0.0, 0.0, kq / n1])
    R = _rotation_to_z(c.c1 / n1)
    w = D_SIGNS @ c.c2 - (kq / n1**2) * c.c1
    t = np.cross(c.c1, w) / n1**2
    cc = CanonicalConstants(c, C, R, t, _angles_from_rotation(R))
    check = cc.adjoint() @ C
    if np.max(np.abs(check - vec)) > 1e-8 * max(1.0, float(np.max(np.abs(vec)))):
        raise SevarError("internal: canonical recovery failed to round-trip")
    return cc


def make_pose_se3(position, tangent, normal):
    """Arc-length CurveJet from a position and an orthonormal (T, N) pair;
    x_ss is stored as the unit normal (curvature scaling happens where a
    jet's kappa is known)."""
    T = np.asarray(tangent, dtype=float)
    T = T / np.linalg.norm(T)
    N = np.asarray(normal, dtype=float)
    N = N - np.dot(N, T) * T
    nn = np.linalg.norm(N)
    if nn <= 1e-12:
        raise InconsistentPoseError("normal is parallel to the tangent")
    N = N / nn
    return CurveJet(position, T, N)


def constants_from_initial_se3(derivation, jet0, pose0):
    """c = M(pose0) v(jet0) with pose0's x_ss rescaled to kappa0."""
    if not pose0.is_arc_length:
        raise NotArcLengthError("initial pose must be arc-length normalized")
    kappa0 = jet0.value("kappa", 0)
    if kappa0 <= 1e-12:
        raise DegenerateCurvatureError(
            "cannot evaluate the moving frame at (numerically) zero curvature"
        )
    n_raw = np.linalg.norm(pose0.x_ss)
    if n_raw <= 1e-12:
        raise InconsistentPoseError("pose normal direction is undefined")
    if abs(n_raw - 1.0) > 1e-9 and abs(n_raw - kappa0) > 1e-6 * max(1.0, kappa0):
        raise InconsistentPoseError(
            f"|x_ss| = {n_raw:.6g} matches neither 1 (unit normal) nor kappa0 = {kappa0:.6g}"
        )
    pose = CurveJet(pose0.x, pose0.x_s, pose0.x_ss / n_raw * kappa0)
    ups = conservation_vector_se3(derivation, jet0)
    return ConservedVector(adjoint_se3(pose).matrix @ ups)


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

def _upsilon_evaluators(derivation):
    fns = [ex.compile_expression(u) for u in derivation.upsilon]

    def values(jet):
        return np.array([f(jet.kappa_derivs, jet.tau_derivs) for f in fns])

    return values


def _find_upsilon1_windows(solution, threshold_rel=1e-6, pad=5e-3):
    """Intervals around zeros of v1 on the span."""
    u1_fn = ex.compile_expression(solution.derivation.upsilon[0])
    s = solution.sample(2001)
    vals = np.array(
        [u1_fn(j.kappa_derivs, j.tau_derivs) for j in (solution.jet_at(si) for si in s)]
    )
    scale = float(np.max(np.abs(vals)))
    thresh = threshold_rel * max(scale, 1e-30)
    windows = []
    crossing = np.where(np.diff(np.signbit(vals)) | (np.abs(vals[:-1]) < thresh))[0]
    for i in crossing:
        z = s[i]
        a, b = z - pad, z + pad
        if windows and a <= windows[-1][1]:
            windows[-1] = (windows[-1][0], b)
        else:
            windows.append((a, b))
    # widen each window until |v1| clears the threshold at both ends
    widened = []
    for a, b in windows:
        for _ in range(60):
            ja, jb = solution.jet_at(max(a, s[0])), solution.jet_at(min(b, s[-1]))
            va = abs(u1_fn(ja.kappa_derivs, ja.tau_derivs))
            vb = abs(u1_fn(jb.kappa_derivs, jb.tau_derivs))
            if va >= thresh and vb >= thresh:
                break
            a -= pad
            b += pad
        widened.append((max(a, s[0]), min(b, s[-1])))
    return widened


def frenet_reconstruct_se3(solution, pose0, grid):
    """Direct Frenet-Serret integration of the solved invariants."""
    T0 = pose0.x_s / np.linalg.norm(pose0.x_s)
    n_raw = pose0.x_ss - np.dot(pose0.x_ss, T0) * T0
    nn = np.linalg.norm(n_raw)
    if nn <= 1e-12:
        # zero-curvature pose: any orthonormal completion works
        seed = np.array([0.0, 0.0, 1.0]) if abs(T0[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        n_raw = np.cross(np.cross(T0, seed), T0)
        nn = np.linalg.norm(n_raw)
    N0 = n_raw / nn
    traj = frenet_curve_se3(
        solution.kappa_of_s, solution.tau_of_s, pose0.x, T0, N0,
        (grid[0], grid[-1]),
    )
    states = traj.state_at(grid).T
    return states[:, 0:3], states[:, 3:6], states[:, 6:9]


def _canonical_anchor(cc, position, tangent):
    Rt = cc.rotation.T
    xt = Rt @ (np.asarray(position, dtype=float) - cc.translation)
    ts = Rt @ np.asarray(tangent, dtype=float)
    return xt, ts


def reconstruct_se3(solution, cc, pose0, opts=None):
    """Reconstruct the extremal curve from the conservation laws.

    In the canonical frame: z~ integrates v1/|c1|; h = D_s(x~.x~) solves a
    linear ODE; r^2 = int h - z~^2; theta integrates the angular-momentum
    law. The rigid motion of ``cc`` then maps the cylindrical solution
    back through pose0. ``cc=None`` requests the Frenet fallback (used for
    the zero-curvature line family), which is flagged in
    ``meta['fallback']``.
    """
    opts = opts or SolveOptions()
    s = solution.sample(opts.n_sample)

    if cc is None:
        if not opts.frenet_fallback:
            raise DegenerateC1Error(
                "no canonical constants available and the Frenet fallback is disabled"
            )
        positions, tangents, normals = frenet_reconstruct_se3(solution, pose0, s)
        recon = Reconstruction(s, positions, tangents, ConservedVector(np.zeros(6)),
                               meta={"fallback": True})
        arc = np.abs(np.sum(tangents**2, axis=1) - 1.0)
        recon.diagnostics["arc_length_residual_max"] = float(arc.max())
        return recon

    windows = _find_upsilon1_windows(solution)
    if windows and not opts.bridge_upsilon_zeros:
        raise UpsilonOneVanishesError(
            "v1 vanishes inside the reconstruction span",
            zeros=[0.5 * (a + b) for a, b in windows],
        )

    segments = _split_span(solution.span, windows)
    recon = _reconstruct_segmented(solution, cc, pose0, s, segments, opts)
    recon.meta["upsilon1_windows"] = windows
    _attach_se3_diagnostics(recon, solution, cc)
    return recon


def _split_span(span, windows):
    """[(a, b, is_gap)] covering span, alternating segments and gaps."""
    s0, s1 = span
    parts = []
    cur = s0
    for a, b in windows:
        if a > cur:
            parts.append((cur, a, False))
        parts.append((max(a, cur), b, True))
        cur = b
    if cur < s1:
        parts.append((cur, s1, False))
    return parts


def _reconstruct_segmented(solution, cc, pose0, grid, segments, opts):
    d = solution.derivation
    n1 = cc.c1_norm
    kq = cc.c1_d_c2
    ratio = kq / n1**2
    ups = _upsilon_evaluators(d)
    u1_fn = ex.compile_expression(d.upsilon[0])

    positions = np.empty((len(grid), 3))
    tangents = np.empty((len(grid), 3))
    normals = np.empty((len(grid), 3))
    theta_series = np.full(len(grid), np.nan)
    r2_series = np.full(len(grid), np.nan)
    gap_mask = np.zeros(len(grid), dtype=bool)

    pose_x = np.asarray(pose0.x, dtype=float)
    pose_T = np.asarray(pose0.x_s, dtype=float)
    pose_N = pose0.x_ss / np.linalg.norm(pose0.x_ss)

    for a, b, is_gap in segments:
        sel = (grid >= a - 1e-12) & (grid <= b + 1e-12)
        seg_grid = grid[sel]
        if is_gap:
            gap_mask |= sel
            pose_jet = CurveJet(pose_x, pose_T, pose_N)
            eval_grid = np.unique(np.concatenate([seg_grid, [a, b]]))
            pts, tg, nm = frenet_reconstruct_se3(solution, pose_jet, eval_grid)
            if len(seg_grid):
                idx = np.searchsorted(eval_grid, seg_grid)
                positions[sel], tangents[sel], normals[sel] = pts[idx], tg[idx], nm[idx]
            pose_x, pose_T, pose_N = pts[-1], tg[-1], nm[-1]
            continue

        seg = _reconstruct_one_segment(
            solution, cc, (a, b), seg_grid, (pose_x, pose_T), n1, ratio, ups, u1_fn, opts
        )
        if len(seg_grid):
            positions[sel] = seg["positions_grid"]
            tangents[sel] = seg["tangents_grid"]
            normals[sel] = seg["normals_grid"]
            theta_series[sel] = seg["theta_grid"]
            r2_series[sel] = seg["r2_grid"]
        pose_x, pose_T, pose_N = seg["end_pose"]

    recon = Reconstruction(
        grid, positions, tangents, cc.constants,
        meta={"fallback": False, "gap_mask": gap_mask},
    )
    recon.channels["theta"] = theta_series
    recon.channels["r_squared"] = r2_series
    recon.channels["normals"] = normals
    return recon


def _reconstruct_one_segment(solution, cc, span, seg_grid, start_pose, n1, ratio,
                             ups, u1_fn, opts):
    d = solution.derivation
    R = cc.rotation
    t = cc.translation
    x0, T0 = start_pose
    xt0, ts0 = _canonical_anchor(cc, x0, T0)

    z0 = xt0[2]
    h0 = 2.0 * float(np.dot(xt0, ts0))
    ih0 = float(np.dot(xt0, xt0))
    r2_0 = xt0[0] ** 2 + xt0[1] ** 2
    theta0 = math.atan2(xt0[1], xt0[0]) if r2_0 > 1e-28 else 0.0

    def fields(si):
        jet = solution.jet_at(si)
        u = ups(jet)
        kappa = jet.kappa_derivs[0]
        return u, kappa

    def rhs(si, y):
        z, h, ih, theta = y
        u, kappa = fields(si)
        u1 = u[0]
        ds_u1 = kappa * u[1]
        g = (u[3] - ratio * u[0]) / n1
        r2 = ih - z * z
        dz = u[0] / n1
        dh = (ds_u1 / u1) * h + 2.0 * kappa * (u[5] - ratio * u[2]) / u1 + 2.0
        dtheta = 0.0 if abs(g) < 1e-13 else g / max(r2, 1e-30)
        return [dz, dh, h, dtheta]

    def negative_radius(si, y):
        return (y[2] - y[0] ** 2) + 1e-10

    negative_radius.terminal = True
    negative_radius.direction = -1

    traj = integrate_ivp(rhs, [z0, h0, ih0, theta0], span,
                         min(opts.rel_tol, 1e-11), min(opts.abs_tol, 1e-13),
                         events=(negative_radius,))
    if traj.meta.get("terminated_by_event"):
        raise NegativeRadiusSquaredError(
            f"r^2 went negative at s = {traj.s[-1]:.6g}; the law-based radius "
            "formula is inconsistent beyond this point"
        )

    def cylinder(si_arr):
        states = traj.state_at(si_arr)
        z, h, ih, theta = states
        r2 = ih - z * z
        r2 = np.where(np.abs(r2) < 1e-14, np.maximum(r2, 0.0), r2)
        if np.any(r2 < -1e-10):
            raise NegativeRadiusSquaredError("r^2 negative beyond rounding tolerance")
        r = np.sqrt(np.maximum(r2, 0.0))
        return z, h, theta, r2, r

    def world_jets(si_arr):
        si_arr = np.atleast_1d(si_arr)
        z, h, theta, r2, r = cylinder(si_arr)
        n = len(si_arr)
        u_all = np.empty((n, 6))
        kappa_arr = np.empty(n)
        for i, si in enumerate(si_arr):
            u_all[i], kappa_arr[i] = fields(float(si))
        u1 = u_all[:, 0]
        zs = u1 / n1
        zss = kappa_arr * u_all[:, 1] / n1
        g = (u_all[:, 3] - ratio * u1) / n1
        g_s = (-kappa_arr * u_all[:, 4] - ratio * kappa_arr * u_all[:, 1]) / n1
        hs = np.array([rhs(float(si), traj.state_at(float(si)))[1] for si in si_arr])
        safe_r = np.where(r > 1e-12, r, np.nan)
        rs = (h - 2.0 * z * zs) / (2.0 * safe_r)
        theta_s = np.where(np.abs(g) < 1e-13, 0.0, g / np.where(r2 > 1e-30, r2, np.nan))
        rss = (hs - 2.0 * zs**2 - 2.0 * z * zss) / (2.0 * safe_r) - rs**2 / safe_r
        theta_ss = np.where(
            np.abs(g) < 1e-13, 0.0, g_s / np.where(r2 > 1e-30, r2, np.nan)
            - 2.0 * g * rs / np.where(r2 > 1e-30, r2 * safe_r, np.nan),
        )
        ct, st = np.cos(theta), np.sin(theta)
        xt = np.column_stack([r * ct, r * st, z])
        xt_s = np.column_stack(
            [rs * ct - r * st * theta_s, rs * st + r * ct * theta_s, zs]
        )
        xt_ss = np.column_stack(
            [
                rss * ct - 2.0 * rs * st * theta_s - r * ct * theta_s**2 - r * st * theta_ss,
                rss * st + 2.0 * rs * ct * theta_s - r * st * theta_s**2 + r * ct * theta_ss,
                zss,
            ]
        )
        pos = xt @ R.T + t
        tg = xt_s @ R.T
        acc = xt_ss @ R.T
        return pos, tg, acc, theta, r2, kappa_arr

    end = world_jets(np.array([span[1]]))
    end_pose = (end[0][0], end[1][0], end[2][0] / max(end[5][0], 1e-30))

    out = {"end_pose": end_pose}
    if len(seg_grid):
        pos, tg, acc, theta, r2, kappa_arr = world_jets(seg_grid)
        out.update(
            positions_grid=pos,
            tangents_grid=tg,
            normals_grid=acc / np.maximum(kappa_arr, 1e-30)[:, None],
            theta_grid=theta,
            r2_grid=r2,
        )
    return out


def _attach_se3_diagnostics(recon, solution, cc):
    """Conservation drift recomputed from the reconstructed curve plus the
    canonical-frame law residuals (all six, including the two that hold
    automatically). Second derivatives in the law residuals come from a
    five-point stencil on the reconstructed tangents, so the residuals are
    an independent check rather than an algebraic identity."""
    d = solution.derivation
    n1 = cc.c1_norm
    kq = cc.c1_d_c2
    R = cc.rotation
    t = cc.translation
    c = cc.constants.c
    ups = _upsilon_evaluators(d)
    s = recon.s
    n = len(s)
    mask = ~recon.meta.get("gap_mask", np.zeros(n, dtype=bool))

    u_all = np.empty((n, 6))
    kappa_arr = np.empty(n)
    for i, si in enumerate(s):
        jet = solution.jet_at(si)
        u_all[i] = ups(jet)
        kappa_arr[i] = jet.kappa_derivs[0]

    xt = (recon.positions - t) @ R
    xt_s = recon.tangents @ R
    arc = np.abs(np.sum(xt_s**2, axis=1) - 1.0)

    h = s[1] - s[0] if n > 1 else 1.0
    xs_fd2 = np.column_stack([_stencil_derivative(xt_s[:, i], h) for i in range(3)])

    inres = np.full((n, 6), np.nan)
    interior = np.zeros(n, dtype=bool)
    interior[2:-2] = True
    ok = interior & mask
    for i in np.where(ok)[0]:
        xi, yi = xt[i, 0], xt[i, 1]
        xsi, ysi, zsi = xt_s[i]
        xss, yss, zss_i = xs_fd2[i]
        kap = kappa_arr[i]
        u = u_all[i]
        inres[i, 0] = n1 * zsi - u[0]
        inres[i, 1] = n1 / kap * zss_i - u[1]
        inres[i, 2] = n1 / kap * (xsi * yss - ysi * xss) - u[2]
        inres[i, 3] = n1 * (xi * ysi - yi * xsi) + kq / n1 * zsi - u[3]
        inres[i, 4] = n1 / kap * (xss * yi - yss * xi) - kq / (kap * n1) * zss_i - u[4]
        inres[i, 5] = (
            n1 / kap * (xi * (zsi * xss - xsi * zss_i) - yi * (ysi * zss_i - zsi * yss))
            + kq / (kap * n1) * (xsi * yss - ysi * xss)
            - u[5]
        )

    m_series = np.full((n, 6), np.nan)
    normals = recon.channels.get("normals")
    if normals is not None:
        for i in np.where(mask)[0]:
            if np.any(np.isnan(normals[i])):
                continue
            P = np.column_stack(
                [recon.tangents[i], normals[i], np.cross(recon.tangents[i], normals[i])]
            )
            X = np.array(
                [
                    [0.0, -recon.positions[i][2], recon.positions[i][1]],
                    [recon.positions[i][2], 0.0, -recon.positions[i][0]],
                    [-recon.positions[i][1], recon.positions[i][0], 0.0],
                ]
            )
            M = np.block(
                [[P, np.zeros((3, 3))], [D_SIGNS @ X @ P, D_SIGNS @ P @ D_SIGNS]]
            )
            m_series[i] = M @ u_all[i]

    recon.channels["conservation_components"] = m_series
    valid = ~np.isnan(m_series[:, 0])
    if valid.any():
        recon.diagnostics["conservation_max_drift"] = float(
            np.max(np.abs(m_series[valid] - c))
        )
    recon.diagnostics["arc_length_residual_max"] = float(np.nanmax(arc[mask]))
    for j, name in enumerate(["in1", "in2", "in3", "in4", "in5", "in6"]):
        vals = inres[ok, j]
        if len(vals):
            recon.diagnostics[f"{name}_residual_max"] = float(np.nanmax(np.abs(vals)))
    theta = recon.channels.get("theta")
    if theta is not None:
        tvals = theta[mask & ~np.isnan(theta)]
        if len(tvals):
            recon.diagnostics["theta_drift_max"] = float(np.max(np.abs(tvals - tvals[0])))


# ---------------------------------------------------------------------------
# Elimination-ideal residual
# ---------------------------------------------------------------------------

def elimination_matrix(kappa, tau):
    m = np.zeros((6, 6))
    m[0, 1] = kappa
    m[1, 0] = -kappa
    m[1, 2] = tau
    m[2, 1] = -tau
    m[3, 4] = -kappa
    m[4, 2] = -1.0
    m[4, 3] = kappa
    m[4, 5] = -tau
    m[5, 1] = -1.0
    m[5, 4] = tau
    return m


def elimination_residual(derivation, solution, n=201, h=1e-2):
    """sup-norm residual of D_s v = M(kappa, tau) v along the solution.

    D_s v is a five-point finite difference of the invariant vector along
    the dense trajectory, so the residual is an independent check that the
    trajectory actually satisfies the Euler-Lagrange pair.
    """
    ups = _upsilon_evaluators(derivation)
    s0, s1 = solution.span
    grid = np.linspace(s0 + 2 * h, s1 - 2 * h, n)
    worst = 0.0
    for s in grid:
        stencil = [ups(solution.jet_at(s + k * h)) for k in (-2, -1, 0, 1, 2)]
        du = (stencil[0] - 8 * stencil[1] + 8 * stencil[3] - stencil[4]) / (12 * h)
        jet = solution.jet_at(s)
        m = elimination_matrix(jet.kappa_derivs[0], jet.tau_derivs[0] if jet.tau_derivs else 0.0)
        worst = max(worst, float(np.max(np.abs(du - m @ stencil[2]))))
    return worst


@dataclass
class PerturbedSolution:
    """Off-solution probe: scales the kappa jets of a solution uniformly."""

    base: Se3Solution
    kappa_factor: float

    @property
    def derivation(self):
        return self.base.derivation

    @property
    def span(self):
        return self.base.span

    def jet_at(self, s):
        jet = self.base.jet_at(s)
        scaled = tuple(self.kappa_factor * v for v in jet.kappa_derivs)
        return ex.InvariantJet(scaled, jet.tau_derivs, jet.s)

    def sample(self, n=None):
        return self.base.sample(n)


# ---------------------------------------------------------------------------
# One-call pipeline
# ---------------------------------------------------------------------------

def run_pipeline_se3(lagrangian, jet0, pose0, span, opts=None):
    """derive -> solve -> constants -> canonicalize -> reconstruct.

    The zero-curvature line family (constant Lagrangians) cannot pass
    through the frame-based constants; it is reconstructed by the flagged
    Frenet fallback instead.
    """
    opts = opts or SolveOptions()
    d = derive_el_se3(lagrangian)
    try:
        sol = solve_se3(d, jet0, span, opts)
    except CurvatureCollapseError as exc:
        if exc.partial is not None or not opts.frenet_fallback:
            raise
        # algebraic zero-curvature family: integrate the line directly
        traj = integrate_ivp(lambda s, y: [0.0, 0.0], [0.0, 0.0], span,
                             opts.rel_tol, opts.abs_tol)
        sol = Se3Solution(d, traj, tuple(span), 1, 1)
        recon = reconstruct_se3(sol, None, pose0, opts)
        return PipelineResult(d, sol, ConservedVector(np.zeros(6)), recon)
    jet_init = sol.jet_at(sol.span[0])
    c = constants_from_initial_se3(d, jet_init, pose0)
    cc = canonicalize_constants(c)
    recon = reconstruct_se3(sol, cc, pose0, opts)
    return PipelineResult(d, sol, c, recon)
