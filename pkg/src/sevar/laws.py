"""Conserved-quantity containers and geometric fit helpers shared by the
planar and spatial pipelines (and by the verification battery)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import D_SIGNS


@dataclass(frozen=True)
class ConservedVector:
    """Constant vector of a structured conservation law (length 3 or 6)."""

    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        if c.shape not in ((3,), (6,)):
            raise ValueError("conserved vectors have length 3 or 6")
        object.__setattr__(self, "c", c)

    def __len__(self):
        return len(self.c)

    @property
    def c1(self):
        """First block (all of c for the planar case)."""
        return self.c[:3]

    @property
    def c2(self):
        return self.c[3:]

    @property
    def c1_norm(self):
        return float(np.linalg.norm(self.c[:3]))

    @property
    def c1_d_c2(self):
        """c1^T D c2 with D = diag(1, -1, 1); 0.0 for planar vectors."""
        if len(self.c) != 6:
            return 0.0
        return float(self.c[:3] @ D_SIGNS @ self.c[3:])


# ---------------------------------------------------------------------------
# Rigid alignment and fit diagnostics
# ---------------------------------------------------------------------------

def rigid_align(moving, fixed):
    """Optimal proper-rigid alignment (Kabsch) of two point sets.

    Returns (rms, aligned) where ``aligned`` is ``moving`` mapped by the
    best rotation + translation onto ``fixed``.
    """
    P = np.asarray(moving, dtype=float)
    Q = np.asarray(fixed, dtype=float)
    if P.shape != Q.shape:
        raise ValueError("point sets must have matching shapes")
    cp = P.mean(axis=0)
    cq = Q.mean(axis=0)
    H = (P - cp).T @ (Q - cq)
    U, _, Vt = np.linalg.svd(H)
    sign = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.eye(P.shape[1])
    D[-1, -1] = sign
    R = Vt.T @ D @ U.T
    aligned = (P - cp) @ R.T + cq
    rms = float(np.sqrt(np.mean(np.sum((aligned - Q) ** 2, axis=1))))
    return rms, aligned


def line_fit_max_deviation(points):
    """Max distance of the points from their total-least-squares line."""
    P = np.asarray(points, dtype=float)
    center = P.mean(axis=0)
    Q = P - center
    _, _, Vt = np.linalg.svd(Q, full_matrices=False)
    direction = Vt[0]
    residual = Q - np.outer(Q @ direction, direction)
    return float(np.max(np.linalg.norm(residual, axis=1)))


def plane_through_axis_max_distance(points, axis_point, axis_dir):
    """Max distance of points from the best plane containing a given axis.

    The plane normal is constrained to be orthogonal to ``axis_dir``; the
    best normal is the smallest-variance direction of the points projected
    onto the plane orthogonal to the axis.
    """
    P = np.asarray(points, dtype=float) - np.asarray(axis_point, dtype=float)
    a = np.asarray(axis_dir, dtype=float)
    a = a / np.linalg.norm(a)
    # orthonormal basis (u, v) of the plane orthogonal to the axis
    seed = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(a, seed)
    u /= np.linalg.norm(u)
    v = np.cross(a, u)
    Q = np.column_stack([P @ u, P @ v])
    cov = Q.T @ Q
    evals, evecs = np.linalg.eigh(cov)
    n2 = evecs[:, 0]  # smallest-variance direction in the (u, v) plane
    return float(np.max(np.abs(Q @ n2)))
