"""Shared numerics: adaptive RK integration with dense output, quadrature
over dense output, safeguarded Newton, and conserved-quantity drift reports.

The integrator is scipy's Dormand-Prince 5(4) embedded pair (``RK45``),
which carries a quartic dense-output interpolant; quadrature evaluates the
interpolant with adaptive Simpson so no re-integration of the model is
needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    MaxStepsExceededError,
    NoConvergenceError,
    OutOfSpanError,
    StepUnderflowError,
)

DEFAULT_REL_TOL = 1e-9
DEFAULT_ABS_TOL = 1e-11


@dataclass
class SolveOptions:
    rel_tol: float = DEFAULT_REL_TOL
    abs_tol: float = DEFAULT_ABS_TOL
    max_step: float = np.inf
    max_steps: int = 1_000_000
    n_sample: int = 801
    bridge_upsilon_zeros: bool = True
    frenet_fallback: bool = True


@dataclass
class Trajectory:
    """Dense solution over a span plus named diagnostic channels."""

    s: np.ndarray
    states: np.ndarray  # shape (len(s), dim)
    dense: object  # scipy OdeSolution
    channels: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def span(self):
        return float(self.s[0]), float(self.s[-1])

    def state_at(self, s):
        s0, s1 = self.span
        s_arr = np.asarray(s, dtype=float)
        if np.any(s_arr < s0 - 1e-12) or np.any(s_arr > s1 + 1e-12):
            raise OutOfSpanError(f"s={s} outside integrated span [{s0}, {s1}]")
        return self.dense(np.clip(s_arr, s0, s1))

    def with_channels(self, **channels):
        merged = dict(self.channels)
        merged.update(channels)
        return Trajectory(self.s, self.states, self.dense, merged, dict(self.meta))


def integrate_ivp(rhs, y0, span, rel_tol=DEFAULT_REL_TOL, abs_tol=DEFAULT_ABS_TOL,
                  max_step=np.inf, max_steps=1_000_000, events=None):
    """Integrate y' = rhs(s, y) over span with dense output.

    Raises StepUnderflowError when the embedded-pair controller cannot
    proceed and MaxStepsExceededError past the step budget. A terminal
    event simply ends the span early; the event time is left in meta.
    """
    result = solve_ivp(
        rhs,
        tuple(span),
        np.atleast_1d(np.asarray(y0, dtype=float)),
        method="RK45",
        dense_output=True,
        rtol=rel_tol,
        atol=abs_tol,
        max_step=max_step,
        events=events,
    )
    if result.status == -1:
        raise StepUnderflowError(f"integration failed: {result.message}")
    if result.t.size > max_steps:
        raise MaxStepsExceededError(f"used {result.t.size} steps (budget {max_steps})")
    meta = {"n_steps": int(result.t.size), "terminated_by_event": result.status == 1}
    if result.status == 1:
        meta["event_s"] = [t.tolist() for t in result.t_events]
    return Trajectory(result.t, result.y.T, result.sol, meta=meta)


# ---------------------------------------------------------------------------
# Quadrature over dense output
# ---------------------------------------------------------------------------

def _simpson(f, a, fa, b, fb, tol, depth):
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return _simpson_step(f, a, fa, m, fm, b, fb, whole, tol, depth)


def _simpson_step(f, a, fa, m, fm, b, fb, whole, tol, depth):
    lm = 0.5 * (a + m)
    rm = 0.5 * (m + b)
    flm = f(lm)
    frm = f(rm)
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
        return left + right + (left + right - whole) / 15.0
    half = 0.5 * tol
    return _simpson_step(f, a, fa, lm, flm, m, fm, left, half, depth - 1) + \
        _simpson_step(f, m, fm, rm, frm, b, fb, right, half, depth - 1)


def adaptive_simpson(f, a, b, tol=1e-11, max_depth=30):
    if a == b:
        return 0.0
    return _simpson(f, a, f(a), b, f(b), tol, max_depth)


def quadrature(traj, channel, s, tol=1e-11):
    """Antiderivative of a channel over the trajectory, anchored to 0 at s0.

    ``channel`` is a callable ``f(s, state) -> float`` evaluated on the
    dense output.
    """
    s0, s1 = traj.span
    s = float(s)
    if s < s0 - 1e-12 or s > s1 + 1e-12:
        raise OutOfSpanError(f"s={s} outside integrated span [{s0}, {s1}]")
    return adaptive_simpson(lambda u: channel(u, traj.dense(u)), s0, s, tol=tol)


def cumulative_quadrature(traj, channel, grid, tol=1e-12):
    """Quadrature of a channel at every grid point (anchored 0 at grid[0])."""
    f = lambda u: channel(u, traj.dense(u))
    out = np.empty(len(grid))
    out[0] = 0.0
    for i in range(1, len(grid)):
        out[i] = out[i - 1] + adaptive_simpson(f, grid[i - 1], grid[i], tol=tol)
    return out


# ---------------------------------------------------------------------------
# Safeguarded Newton
# ---------------------------------------------------------------------------

def _fd_jacobian(residual, x, r):
    n = x.size
    jac = np.empty((r.size, n))
    for i in range(n):
        h = 1e-7 * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += h
        jac[:, i] = (np.atleast_1d(residual(xp if n > 1 else xp[0])) - r) / h
    return jac


def newton_solve(residual, guess, jacobian=None, tol=1e-12, max_iter=50):
    """Newton iteration with step-halving safeguard.

    Works for scalar or small-vector problems; ``jacobian(x)`` is optional
    (finite differences otherwise). Returns the root; raises
    NoConvergenceError after ``max_iter`` iterations.
    """
    scalar = np.isscalar(guess) or np.asarray(guess).ndim == 0
    x = np.atleast_1d(np.asarray(guess, dtype=float)).copy()

    def call(v):
        return np.atleast_1d(np.asarray(residual(v[0] if scalar else v), dtype=float))

    r = call(x)
    norm = np.max(np.abs(r))
    norm0 = norm
    # large residual magnitudes (e.g. 1/kappa^3 coefficients near a
    # curvature collapse) put the evaluation roundoff floor above any
    # absolute tolerance; a ~1e8-fold reduction counts as converged
    floor = max(tol, 1e-8 * norm0)
    for _ in range(max_iter):
        if norm <= tol:
            return float(x[0]) if scalar else x
        if jacobian is None:
            if scalar:
                h = 1e-7 * max(1.0, abs(x[0]))
                jac = np.array([[(call(x + h)[0] - r[0]) / h]])
            else:
                jac = _fd_jacobian(residual, x, r)
        else:
            jac = np.atleast_2d(np.asarray(jacobian(x[0] if scalar else x), dtype=float))
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError as exc:
            raise NoConvergenceError(f"singular Jacobian in Newton iteration: {exc}")
        scale = 1.0
        for _ in range(25):
            x_new = x + scale * step
            r_new = call(x_new)
            norm_new = np.max(np.abs(r_new))
            if np.isfinite(norm_new) and (norm_new < norm or norm_new <= tol):
                break
            scale *= 0.5
        else:
            if norm <= floor:
                return float(x[0]) if scalar else x
            raise NoConvergenceError(
                f"Newton safeguard exhausted (no descent; residual {norm:.3e})"
            )
        x, r, norm = x_new, r_new, norm_new
    if norm <= floor:
        return float(x[0]) if scalar else x
    raise NoConvergenceError(f"Newton did not reach tol={tol}; residual {norm:.3e}")


# ---------------------------------------------------------------------------
# Drift monitoring
# ---------------------------------------------------------------------------

@dataclass
class DriftRecord:
    name: str
    initial: float
    max_abs_drift: float
    rel_drift: float
    series: np.ndarray


def drift_monitor(traj, conserved_fns, grid=None):
    """Per-quantity max |value(s) - value(s0)| and relative drift.

    ``conserved_fns`` maps names to callables ``f(s, state) -> float``.
    """
    if grid is None:
        grid = traj.s
    report = {}
    for name, fn in conserved_fns.items():
        series = np.array([fn(float(s), traj.dense(float(s))) for s in grid])
        drift = np.abs(series - series[0])
        max_drift = float(drift.max())
        scale = max(abs(series[0]), 1e-300)
        report[name] = DriftRecord(name, float(series[0]), max_drift, max_drift / scale, series)
    return report
