"""Convolutional view of a discrete SSM.

The output of ``x_t = A x_{t-1} + B u_t, y_t = C x_t + D u_t`` started from
rest is ``y = K * u + D u`` with kernel ``K = (C B, C A B, C A^2 B, ...)``.
"""

from __future__ import annotations

import numpy as np

from .disc import DiscreteSSM
from .linalg import causal_convolve, series_matinv, series_matmul

__all__ = [
    "krylov_matrix",
    "krylov_function",
    "ssm_kernel",
    "apply_convolutional",
    "apply_recurrent",
    "resolvent_kernel_fast",
    "RANK_CUTOFF",
]

RANK_CUTOFF = 1e-10
RESOLVENT_MAX_N = 64
RESOLVENT_MAX_L = 4096


def krylov_matrix(a_bar, b_bar, L: int):
    """Columns ``b, A b, A^2 b, ..., A^{L-1} b`` by repeated squaring.

    Leading batch axes are allowed: ``a_bar (..., N, N)``, ``b_bar (..., N)``
    give ``(..., N, L)``. Each round multiplies the block computed so far by
    the next power ``A^(2^j)``, so only O(log L) rounds are needed.
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    A = np.asarray(a_bar, dtype=np.float64)
    x = np.asarray(b_bar, dtype=np.float64)[..., None]
    while x.shape[-1] < L:
        width = x.shape[-1]
        take = min(width, L - width)
        x = np.concatenate([x, A @ x[..., :take]], axis=-1)
        if x.shape[-1] < L:
            A = A @ A
    return x


def krylov_function(a_bar, b_bar, c, L: int):
    """Taps ``c A^i b`` for ``i < L``; ``c`` may be a vector or an (M, N) block."""
    c = np.asarray(c, dtype=np.float64)
    return c @ krylov_matrix(a_bar, b_bar, L)


def ssm_kernel(ssm: DiscreteSSM, L: int):
    """``(M, L)`` kernel of a discrete SSM."""
    return krylov_function(ssm.a_bar, ssm.b_bar, ssm.c, L)


def apply_convolutional(taps, d, u):
    """``causal_convolve(taps, u) + d u``.

    1-D ``taps`` give an ``(L,)`` output; ``(M, L)`` taps with ``d`` of shape
    ``(M,)`` give ``(L, M)``.
    """
    taps = np.asarray(taps, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if taps.shape[-1] != u.shape[-1]:
        raise ValueError(f"length mismatch: kernel {taps.shape[-1]} vs u {u.shape[-1]}")
    if taps.ndim == 1:
        return causal_convolve(taps, u) + float(d) * u
    d = np.asarray(d, dtype=np.float64)
    return (causal_convolve(taps, u[None, :]) + d[:, None] * u[None, :]).T


def apply_recurrent(ssm: DiscreteSSM, u, x0=None):
    """Sequential unroll. Returns ``(y, x_final)`` with ``y`` of shape ``(L, M)``."""
    u = np.asarray(u, dtype=np.float64)
    x = np.zeros(ssm.n) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != (ssm.n,):
        raise ValueError(f"x0 must have shape ({ssm.n},)")
    y = np.empty((u.shape[0], ssm.channels))
    for t, ut in enumerate(u):
        x = ssm.a_bar @ x + ssm.b_bar * ut
        y[t] = ssm.c @ x + ssm.d * ut
    return y, x


# -- fast resolvent ------------------------------------------------------------


def _low_rank(M):
    """``M = U V^T`` with singular values below the absolute cutoff dropped."""
    u, s, vt = np.linalg.svd(M)
    r = int(np.sum(s > RANK_CUTOFF))
    return u[:, :r] * s[:r], vt[:r].T


def _resolvent(A, B, C, L):
    """``C^T (I - A x)^{-1} B`` as a ``(kc, kb, L)`` array of truncated series."""
    n = A.shape[0]
    if n == 1:
        geom = A[0, 0] ** np.arange(L)
        return (C.T @ B)[..., None] * geom
    h = n // 2
    U_low, V_low = _low_rank(A[h:, :h])
    U_up, V_up = _low_rank(A[:h, h:])
    kc, kb = C.shape[1], B.shape[1]
    R0 = _resolvent(A[:h, :h], np.hstack([B[:h], U_up]), np.hstack([C[:h], V_low]), L)
    R1 = _resolvent(A[h:, h:], np.hstack([B[h:], U_low]), np.hstack([C[h:], V_up]), L)

    out = R0[:kc, :kb] + R1[:kc, :kb]
    q_low, q_up = U_low.shape[1], U_up.shape[1]
    q = q_low + q_up
    if q == 0:
        return out
    M2 = np.concatenate([R1[:kc, kb:], R0[:kc, kb:]], axis=1)
    M3 = np.zeros((q, q, L))
    M3[:q_low, q_low:] = R0[kc:, kb:]
    M3[q_low:, :q_low] = R1[kc:, kb:]
    M4 = np.concatenate([R0[kc:, :kb], R1[kc:, :kb]], axis=0)

    # I - A x = G - x U V^T with G block diagonal, so Woodbury gives
    # C^T (I - A x)^{-1} B = M1 + x M2 (I - x M3)^{-1} M4.
    F = np.zeros((q, q, L))
    F[..., 0] = np.eye(q)
    F[..., 1:] = -M3[..., :-1]
    W = series_matinv(F, L)
    corr = series_matmul(series_matmul(M2, W, L), M4, L)
    out[..., 1:] += corr[..., :-1]
    return out


def resolvent_kernel_fast(A, b, c, L: int):
    """Taps ``c A^i b`` (``i < L``) from the series of ``c^T (I - A x)^{-1} b``.

    Divide and conquer over quadrants: off-diagonal quadrants are factored
    by truncated SVD and folded back in with the Woodbury identity, carrying
    matrices of power series truncated at ``x^L``. Floating-point only and
    meant for small ``N`` (a power of two, at most 64).

    Raises
    ------
    SingularMatrixError
        If a series inverse meets a singular constant term.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    n = A.shape[0]
    if n < 1 or n & (n - 1) or n > RESOLVENT_MAX_N:
        raise ValueError(f"N must be a power of two <= {RESOLVENT_MAX_N}, got {n}")
    if not 1 <= L <= RESOLVENT_MAX_L:
        raise ValueError(f"L must lie in [1, {RESOLVENT_MAX_L}], got {L}")
    return _resolvent(A, b.reshape(n, 1), c.reshape(n, 1), L)[0, 0]
