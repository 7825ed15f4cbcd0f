"""Differential geometry of plane and space curves: curvature and torsion,
group actions, moving frames, invariantization, adjoint matrices and
finite-difference syzygy residuals.

Conventions. Planar curvature is signed. Frames are "right" frames: the
frame parameters, fed to :func:`apply_frame_se2` / :func:`apply_frame_se3`,
move the curve point to the origin and its tangent to the positive x-axis
(with the normal along +y in space). All two-argument arctangents are
quadrant-aware.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateCurvatureError,
    DegenerateTangentError,
    NotArcLengthError,
    UndefinedTorsionError,
)

TANGENT_TOL = 1e-12
CURVATURE_TOL = 1e-12
ARC_LENGTH_TOL = 1e-9

D_SIGNS = np.diag([1.0, -1.0, 1.0])
B_QUAD_SE2 = np.diag([1.0, 1.0, 0.0])
B_QUAD_SE3 = np.diag([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
D_QUAD_SE3 = np.block([[np.zeros((3, 3)), D_SIGNS], [D_SIGNS, np.zeros((3, 3))]])


# ---------------------------------------------------------------------------
# Jets and frame parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurveJet:
    """Position and arc-length derivatives of a curve at one point."""

    x: np.ndarray
    x_s: np.ndarray
    x_ss: np.ndarray
    x_sss: np.ndarray | None = None

    def __post_init__(self):
        for name in ("x", "x_s", "x_ss"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.x_sss is not None:
            object.__setattr__(self, "x_sss", np.asarray(self.x_sss, dtype=float))
        if self.x.shape[0] not in (2, 3):
            raise ValueError("curve jets are planar or spatial")

    @property
    def dim(self):
        return self.x.shape[0]

    @property
    def is_arc_length(self):
        return abs(np.linalg.norm(self.x_s) - 1.0) <= ARC_LENGTH_TOL


def _normalize_angle(a):
    """Wrap to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    return a if a > -math.pi else a + 2.0 * math.pi


@dataclass(frozen=True)
class FrameParams:
    """Group parameters of a right moving frame (translation + angles)."""

    group: str  # "se2" | "se3"
    translation: np.ndarray
    angles: np.ndarray  # (theta,) for se2; (alpha, beta, gamma) for se3

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        object.__setattr__(
            self, "angles", np.array([_normalize_angle(a) for a in np.atleast_1d(self.angles)])
        )


@dataclass(frozen=True)
class AdjointMatrix:
    group: str
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=float))


def _require_arc_length(j):
    if not j.is_arc_length:
        raise NotArcLengthError(
            f"|x_s| = {np.linalg.norm(j.x_s):.12g} is not 1 within {ARC_LENGTH_TOL}"
        )


# ---------------------------------------------------------------------------
# Curvature and torsion
# ---------------------------------------------------------------------------

def curvature_torsion(j, strict=False):
    """(kappa, tau) of a curve jet.

    Planar jets get the signed curvature and tau = 0. For space jets the
    torsion needs ||x_s x x_ss|| above tolerance; below it tau is returned
    as nan (flagged undefined), or UndefinedTorsionError is raised when
    ``strict``.
    """
    speed = np.linalg.norm(j.x_s)
    if speed <= TANGENT_TOL:
        raise DegenerateTangentError("zero tangent vector")
    if j.dim == 2:
        num = j.x_s[0] * j.x_ss[1] - j.x_s[1] * j.x_ss[0]
        return num / speed**3, 0.0
    w = np.cross(j.x_s, j.x_ss)
    wn = np.linalg.norm(w)
    kappa = wn / speed**3
    if wn <= CURVATURE_TOL:
        if strict:
            raise UndefinedTorsionError("torsion undefined: ||x_s x x_ss|| below tolerance")
        return kappa, math.nan
    if j.x_sss is None:
        raise UndefinedTorsionError("torsion needs the third arc-length derivative")
    tau = float(np.dot(j.x_sss, w)) / wn**2
    return kappa, tau


# ---------------------------------------------------------------------------
# Group actions (inverse form: z -> R^(-1)-style normalization action)
# ---------------------------------------------------------------------------

def rot2(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]])


def rotation_se3(alpha, beta, gamma):
    """Rotation R(alpha, beta, gamma); its transpose is the frame rotation."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    return np.array(
        [
            [cb * cg, -sa * sb * cg - ca * sg, -ca * sb * cg + sa * sg],
            [cb * sg, -sa * sb * sg + ca * cg, -ca * sb * sg - sa * cg],
            [sb, sa * cb, ca * cb],
        ]
    )


def frame_rotation(params):
    """The matrix Q with x~ = Q (x - t) for the frame's normalization action."""
    if params.group == "se2":
        return rot2(params.angles[0])
    return rotation_se3(*params.angles).T


def apply_frame(params, j):
    """Act on a curve jet with a frame / group element in inverse form."""
    Q = frame_rotation(params)
    return CurveJet(
        Q @ (j.x - params.translation),
        Q @ j.x_s,
        Q @ j.x_ss,
        None if j.x_sss is None else Q @ j.x_sss,
    )


def compose_inverse_form(p_outer, p_inner):
    """Composition of two inverse-form actions as (Q, t) matrices.

    Returns the pair (Q, t) with x~ = Q (x - t) equal to applying
    ``p_inner`` first and ``p_outer`` second.
    """
    Q1, t1 = frame_rotation(p_outer), p_outer.translation
    Q2, t2 = frame_rotation(p_inner), p_inner.translation
    return Q1 @ Q2, t2 + Q2.T @ t1


# ---------------------------------------------------------------------------
# Moving frames
# ---------------------------------------------------------------------------

def moving_frame_se2(j):
    """Right frame (a, b, theta): a = x, b = y, theta = atan2(y_s, x_s)."""
    if np.linalg.norm(j.x_s) <= TANGENT_TOL:
        raise DegenerateTangentError("zero tangent vector")
    theta = math.atan2(j.x_s[1], j.x_s[0])
    return FrameParams("se2", j.x.copy(), np.array([theta]))


def _frenet_triad(j):
    T = j.x_s / np.linalg.norm(j.x_s)
    n_raw = j.x_ss - np.dot(j.x_ss, T) * T
    nn = np.linalg.norm(n_raw)
    if nn <= CURVATURE_TOL:
        raise DegenerateCurvatureError("curvature below tolerance: normal undefined")
    N = n_raw / nn
    return T, N, np.cross(T, N)


def moving_frame_se3(j):
    """Right frame (a, b, c, alpha, beta, gamma) sending the point to the
    origin, the tangent to +x and the principal normal to +y."""
    if np.linalg.norm(j.x_s) <= TANGENT_TOL:
        raise DegenerateTangentError("zero tangent vector")
    T, N, B = _frenet_triad(j)
    p = math.hypot(T[0], T[1])
    beta = math.atan2(T[2], p)
    if p > 1e-14:
        gamma = math.atan2(T[1], T[0])
        alpha = math.atan2(N[2], B[2])
    else:
        # vertical tangent: gamma is free, fix it to 0
        gamma = 0.0
        alpha = math.atan2(-N[0] * math.copysign(1.0, T[2]), N[1])
    return FrameParams("se3", j.x.copy(), np.array([alpha, beta, gamma]))


# ---------------------------------------------------------------------------
# Invariantization
# ---------------------------------------------------------------------------

def invariantize_se2(j):
    """Lowest-order normalized invariants (I^x_1, I^y_11)."""
    eta = np.linalg.norm(j.x_s)
    if eta <= TANGENT_TOL:
        raise DegenerateTangentError("zero tangent vector")
    i_y11 = (j.x_s[0] * j.x_ss[1] - j.x_s[1] * j.x_ss[0]) / eta
    return float(eta), float(i_y11)


def invariantize_t_se2(x_s, x_t):
    """t-direction invariantizations (I^x_2, I^y_2) of a surface jet."""
    eta = math.hypot(x_s[0], x_s[1])
    if eta <= TANGENT_TOL:
        raise DegenerateTangentError("zero tangent vector")
    i_x2 = (x_s[0] * x_t[0] + x_s[1] * x_t[1]) / eta
    i_y2 = (x_s[0] * x_t[1] - x_s[1] * x_t[0]) / eta
    return i_x2, i_y2


# ---------------------------------------------------------------------------
# Adjoint matrices
# ---------------------------------------------------------------------------

def adjoint_se2(j):
    """3x3 conservation-law matrix of a planar arc-length jet."""
    _require_arc_length(j)
    xs, ys = j.x_s
    x, y = j.x
    m = np.array(
        [
            [xs, -ys, 0.0],
            [ys, xs, 0.0],
            [x * ys - y * xs, x * xs + y * ys, 1.0],
        ]
    )
    return AdjointMatrix("se2", m)


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def frenet_rotation(j):
    """Columns (x_s | x_ss/kappa | x_s x x_ss / kappa) of an arc-length jet."""
    _require_arc_length(j)
    w = np.cross(j.x_s, j.x_ss)
    kappa = np.linalg.norm(w)
    if kappa <= CURVATURE_TOL:
        raise DegenerateCurvatureError("curvature below tolerance")
    if abs(np.dot(j.x_s, j.x_ss)) > ARC_LENGTH_TOL * max(1.0, kappa):
        raise NotArcLengthError("x_ss is not orthogonal to x_s")
    return np.column_stack([j.x_s, j.x_ss / kappa, w / kappa])


def adjoint_se3(j):
    """6x6 conservation-law matrix [[P, 0], [D X P, D P D]] of a space jet."""
    P = frenet_rotation(j)
    X = skew(j.x)
    m = np.block([[P, np.zeros((3, 3))], [D_SIGNS @ X @ P, D_SIGNS @ P @ D_SIGNS]])
    return AdjointMatrix("se3", m)


def adjoint_from_pose(group, position, rotation):
    """Adjoint-style block matrix from an explicit pose rotation.

    For se3 ``rotation`` has columns (T, N, B); for se2 it is the 2x2
    rotation with first column the tangent.
    """
    if group == "se2":
        xs, ys = rotation[:, 0]
        x, y = position
        return AdjointMatrix(
            "se2",
            np.array(
                [
                    [xs, -ys, 0.0],
                    [ys, xs, 0.0],
                    [x * ys - y * xs, x * xs + y * ys, 1.0],
                ]
            ),
        )
    X = skew(position)
    return AdjointMatrix(
        "se3",
        np.block(
            [
                [rotation, np.zeros((3, 3))],
                [D_SIGNS @ X @ rotation, D_SIGNS @ rotation @ D_SIGNS],
            ]
        ),
    )


def adjoint_group_se3(R, t):
    """Adjoint of the group element x -> R x + t: [[R, 0], [D skew(t) R, D R D]]."""
    return np.block([[R, np.zeros((3, 3))], [D_SIGNS @ skew(t) @ R, D_SIGNS @ R @ D_SIGNS]])


def adjoint_group_se2(theta, t):
    """Adjoint of the planar element (theta, a, b) in the left-action form."""
    c, s = math.cos(theta), math.sin(theta)
    a, b = t
    return np.array(
        [
            [c, -s, 0.0],
            [s, c, 0.0],
            [a * s - b * c, a * c + b * s, 1.0],
        ]
    )


# ---------------------------------------------------------------------------
# Syzygy residuals by finite differences
# ---------------------------------------------------------------------------

def _d1(f, u, h):
    return (f(u + h) - f(u - h)) / (2.0 * h)


def _d2(f, u, h):
    return (f(u + h) - 2.0 * f(u) + f(u - h)) / (h * h)


def _surface_scalars(surface, h):
    """Closure computing (eta, I^y_11, kappa, I^x_2, I^y_2) at (s, t) by
    centered differences of the surface map."""

    def scalars(s, t):
        x_s = _d1(lambda u: np.asarray(surface(u, t), dtype=float), s, h)
        x_t = _d1(lambda v: np.asarray(surface(s, v), dtype=float), t, h)
        x_ss = _d2(lambda u: np.asarray(surface(u, t), dtype=float), s, h)
        eta = math.hypot(x_s[0], x_s[1])
        if eta <= TANGENT_TOL:
            raise DegenerateTangentError("zero tangent on the surface")
        i_y11 = (x_s[0] * x_ss[1] - x_s[1] * x_ss[0]) / eta
        kappa = i_y11 / eta**2
        i_x2, i_y2 = invariantize_t_se2(x_s, x_t)
        return np.array([eta, i_y11, kappa, i_x2, i_y2])

    return scalars


def syzygy_residual_se2(surface, s0, t0, h=1e-4):
    """Residuals (r1, r2) of the two planar syzygies at (s0, t0).

    r1 = D_t eta - (D_s I^x_2 - kappa eta I^y_2)
    r2 = D_t I^y_11 - (D_s^2 I^y_2 - (eta_s/eta) D_s I^y_2
         - kappa^2 eta^2 I^y_2 + 2 kappa eta D_s I^x_2 + kappa_s eta I^x_2)

    All derivatives are centered differences of step h, so the residuals
    vanish at rate O(h^2) on smooth surfaces.
    """
    scalars = _surface_scalars(surface, h)
    eta, i_y11, kappa, i_x2, i_y2 = scalars(s0, t0)

    dt = _d1(lambda v: scalars(s0, v), t0, h)
    ds = _d1(lambda u: scalars(u, t0), s0, h)
    dss = _d2(lambda u: scalars(u, t0), s0, h)

    eta_t, iy11_t = dt[0], dt[1]
    eta_s, kappa_s = ds[0], ds[2]
    ix2_s, iy2_s = ds[3], ds[4]
    iy2_ss = dss[4]

    r1 = eta_t - (ix2_s - kappa * eta * i_y2)
    r2 = iy11_t - (
        iy2_ss
        - (eta_s / eta) * iy2_s
        - kappa**2 * eta**2 * i_y2
        + 2.0 * kappa * eta * ix2_s
        + kappa_s * eta * i_x2
    )
    return float(r1), float(r2)


# ---------------------------------------------------------------------------
# Frenet-Serret integration (reconstruction oracle and fallback)
# ---------------------------------------------------------------------------

def frenet_curve_se2(kappa_of_s, pose0, span, rel_tol=1e-11, abs_tol=1e-13):
    """Integrate theta' = kappa, (x', y') = (cos theta, sin theta).

    ``pose0 = (x, y, theta)``. Returns an ode.Trajectory with state
    (x, y, theta).
    """
    from .ode import integrate_ivp

    x0, y0, theta0 = pose0

    def rhs(s, y):
        return [math.cos(y[2]), math.sin(y[2]), kappa_of_s(s)]

    return integrate_ivp(rhs, [x0, y0, theta0], span, rel_tol, abs_tol)


def frenet_curve_se3(kappa_of_s, tau_of_s, x0, T0, N0, span,
                     rel_tol=1e-11, abs_tol=1e-13):
    """Integrate x' = T, T' = kappa N, N' = -kappa T + tau B, B' = -tau N.

    Returns an ode.Trajectory with state (x(3), T(3), N(3), B(3)).
    """
    from .ode import integrate_ivp

    T0 = np.asarray(T0, dtype=float)
    N0 = np.asarray(N0, dtype=float)
    B0 = np.cross(T0, N0)

    def rhs(s, y):
        T, N, B = y[3:6], y[6:9], y[9:12]
        k = kappa_of_s(s)
        t = tau_of_s(s)
        return np.concatenate([T, k * N, -k * T + t * B, -t * N])

    y0 = np.concatenate([np.asarray(x0, dtype=float), T0, N0, B0])
    return integrate_ivp(rhs, y0, span, rel_tol, abs_tol)


# ---------------------------------------------------------------------------
# Random sampling helpers (used by tests and the self-check battery)
# ---------------------------------------------------------------------------

def random_frame_se2(rng, translation_scale=2.0):
    return FrameParams(
        "se2",
        rng.uniform(-translation_scale, translation_scale, size=2),
        np.array([rng.uniform(-math.pi, math.pi)]),
    )


def random_frame_se3(rng, translation_scale=2.0):
    return FrameParams(
        "se3",
        rng.uniform(-translation_scale, translation_scale, size=3),
        np.array(
            [
                rng.uniform(-math.pi, math.pi),
                rng.uniform(-math.pi / 2 + 0.05, math.pi / 2 - 0.05),
                rng.uniform(-math.pi, math.pi),
            ]
        ),
    )


def random_arclength_jet(rng, dim, kappa_range=(0.3, 2.0)):
    """Arc-length jet with |x_s| = 1, x_ss a normal of random magnitude."""
    v = rng.normal(size=dim)
    T = v / np.linalg.norm(v)
    w = rng.normal(size=dim)
    n_raw = w - np.dot(w, T) * T
    while np.linalg.norm(n_raw) < 1e-6:
        w = rng.normal(size=dim)
        n_raw = w - np.dot(w, T) * T
    N = n_raw / np.linalg.norm(n_raw)
    kappa = rng.uniform(*kappa_range)
    x = rng.uniform(-2.0, 2.0, size=dim)
    x_sss = rng.normal(size=dim)
    return CurveJet(x, T, kappa * N, x_sss)
