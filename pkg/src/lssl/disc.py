"""Discretization of continuous state-space models.

The generalized bilinear transform (GBT) and the two difference maps it is
built from::

    forward_diff(A, dt, x)  = (I + dt A) x
    backward_diff(A, dt, x) = (I + dt A)^{-1} x

together with their reverse-mode adjoints. Every map accepts ``x`` either as
a vector or as an ``(N, k)`` block of column vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .hippo import StructuredStateMatrix
from .linalg import SingularMatrixError, tridiag_solve

__all__ = [
    "DiscreteSSM",
    "discretize",
    "gbt_discretize",
    "forward_diff",
    "backward_diff",
    "factor_backward",
    "bilinear_step",
    "forward_diff_structured",
    "backward_diff_structured",
    "bilinear_matrix_structured",
    "forward_diff_grad",
    "backward_diff_grad",
    "sigmoid",
    "gate_step",
]

PIVOT_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteSSM:
    """``x_t = a_bar x_{t-1} + b_bar u_t``, ``y_t = c x_t + d u_t``."""

    a_bar: np.ndarray
    b_bar: np.ndarray
    c: np.ndarray
    d: np.ndarray
    dt: float

    def __post_init__(self):
        a_bar = np.asarray(self.a_bar, dtype=np.float64)
        b_bar = np.asarray(self.b_bar, dtype=np.float64)
        c = np.atleast_2d(np.asarray(self.c, dtype=np.float64))
        d = np.atleast_1d(np.asarray(self.d, dtype=np.float64))
        n = b_bar.shape[0]
        if a_bar.shape != (n, n):
            raise ValueError(f"a_bar has shape {a_bar.shape}, expected ({n}, {n})")
        if c.shape[1] != n or d.shape != (c.shape[0],):
            raise ValueError(f"inconsistent c {c.shape} / d {d.shape} for N={n}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(a_bar)):
            raise ValueError("a_bar has non-finite entries")
        for name, v in (("a_bar", a_bar), ("b_bar", b_bar), ("c", c), ("d", d)):
            object.__setattr__(self, name, v)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n(self) -> int:
        return self.b_bar.shape[0]

    @property
    def channels(self) -> int:
        return self.c.shape[0]


def _lu(M):
    lu, piv = scipy.linalg.lu_factor(M, check_finite=True)
    if np.min(np.abs(np.diag(lu))) <= PIVOT_TOL:
        raise SingularMatrixError("singular system in backward difference")
    return lu, piv


def gbt_discretize(A, B, dt: float, alpha: float = 0.5):
    """Return ``(a_bar, b_bar)`` for the GBT with parameter ``alpha``.

    ``alpha = 0`` is forward Euler, ``1`` backward Euler, ``0.5`` bilinear.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_1d(np.asarray(B, dtype=np.float64))
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    n = A.shape[0]
    eye = np.eye(n)
    lu = _lu(eye - alpha * dt * A)
    a_bar = scipy.linalg.lu_solve(lu, eye + (1.0 - alpha) * dt * A)
    b_bar = dt * scipy.linalg.lu_solve(lu, B)
    return a_bar, b_bar


def discretize(A, B, C, D, dt: float, alpha: float = 0.5) -> DiscreteSSM:
    a_bar, b_bar = gbt_discretize(A, B, dt, alpha)
    return DiscreteSSM(a_bar, b_bar, C, D, dt)


def forward_diff(A, dt: float, x):
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: A {A.shape} vs x {x.shape}")
    return x + dt * (A @ x)


def factor_backward(A, dt: float):
    """LU factors of ``I + dt A``, reusable by :func:`backward_diff`."""
    A = np.asarray(A, dtype=np.float64)
    return _lu(np.eye(A.shape[0]) + dt * A)


def backward_diff(A, dt: float, x, *, lu=None, trans: bool = False):
    """Solve ``(I + dt A) y = x`` (or the transposed system) by partial-pivot LU."""
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: A {A.shape} vs x {x.shape}")
    if lu is None:
        lu = factor_backward(A, dt)
    return scipy.linalg.lu_solve(lu, x, trans=1 if trans else 0)


def bilinear_step(A, B, dt: float, x, u):
    """One bilinear update composed from the two difference maps."""
    v = forward_diff(A, 0.5 * dt, x) + dt * np.multiply.outer(np.asarray(B, dtype=np.float64), u)
    return backward_diff(A, -0.5 * dt, v)


# -- structured difference maps ------------------------------------------------


def forward_diff_structured(S: StructuredStateMatrix, dt: float, x):
    """``(I + dt P(D + T^{-1})Q) x`` with one tridiagonal solve."""
    x = np.asarray(x, dtype=np.float64)
    return x + dt * S.matvec(x)


def backward_diff_structured(S: StructuredStateMatrix, dt: float, x):
    """``(I + dt P(D + T^{-1})Q)^{-1} x`` in O(N).

    Uses ``G^{-1} = Q^{-1} (T P^{-1} Q^{-1} + dt T D + dt I)^{-1} T P^{-1}``.
    """
    x = np.asarray(x, dtype=np.float64)
    col = (-1,) + (1,) * (x.ndim - 1)
    middle = S.T.scale_cols(1.0 / (S.P * S.Q) + dt * S.D).add_diagonal(dt)
    rhs = S.T @ (x / S.P.reshape(col))
    return tridiag_solve(middle, rhs) / S.Q.reshape(col)


def bilinear_matrix_structured(S: StructuredStateMatrix, B, dt: float):
    """Bilinear ``(a_bar, b_bar)`` of ``x' = S x + B u`` via structured MVMs.

    ``a_bar`` is obtained by pushing the identity through the black-box
    update, so the cost is O(N^2) rather than a dense O(N^3) inverse.
    """
    eye = np.eye(S.n)
    a_bar = backward_diff_structured(S, -0.5 * dt, forward_diff_structured(S, 0.5 * dt, eye))
    b_bar = dt * backward_diff_structured(S, -0.5 * dt, np.asarray(B, dtype=np.float64))
    return a_bar, b_bar


# -- adjoints -------------------------------------------------------------------


def backward_diff_grad(A, dt: float, x, dy, *, lu=None):
    """Adjoints of ``y = (I + dt A)^{-1} x``.

    Returns ``(dx, d_dt, dA)`` with ``dx = (I + dt A)^{-T} dy``,
    ``d_dt = -dx^T A y`` and ``dA = -dt dx y^T``. Block inputs are summed over
    columns for ``d_dt`` and ``dA``.
    """
    A = np.asarray(A, dtype=np.float64)
    if lu is None:
        lu = factor_backward(A, dt)
    y = backward_diff(A, dt, x, lu=lu)
    dx = backward_diff(A, dt, dy, lu=lu, trans=True)
    d_dt = -float(np.sum(dx * (A @ y)))
    dA = -dt * (dx @ y.T if dx.ndim == 2 else np.outer(dx, y))
    return dx, d_dt, dA


def forward_diff_grad(A, dt: float, x, dy):
    """Adjoints of ``y = (I + dt A) x``: ``(dx, d_dt, dA)``."""
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    dx = forward_diff(A.T, dt, dy)
    d_dt = float(np.sum(dy * (A @ x)))
    dA = dt * (dy @ x.T if dy.ndim == 2 else np.outer(dy, x))
    return dx, d_dt, dA


# -- gates ------------------------------------------------------------------------


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def gate_step(x_prev, u, z):
    """Sigmoid-gated update ``(1 - sigmoid(z)) x_prev + sigmoid(z) u``."""
    g = sigmoid(z)
    return (1.0 - g) * x_prev + g * u
