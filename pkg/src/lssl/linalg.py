"""Dense, diagonal and tridiagonal linear algebra, FFT convolution and
truncated power series.

Vectors and dense matrices are plain float64 ``numpy`` arrays. Only the
tridiagonal storage gets its own type, since its three bands have to stay
consistent with one another.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SingularMatrixError",
    "TridiagonalMatrix",
    "dense_matvec",
    "tridiag_solve",
    "tridiag_matvec",
    "next_pow2",
    "fft",
    "ifft",
    "causal_convolve",
    "causal_correlate",
    "poly_mul",
    "poly_inv_mod",
    "series_matmul",
    "series_matinv",
    "offdiag_rank",
]

PIVOT_TOL = 1e-14
POLY_FFT_THRESHOLD = 64


class SingularMatrixError(ArithmeticError):
    """A pivot (or a required constant term) fell below tolerance."""


def _as_vector(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {x.shape}")
    return x


def dense_matvec(A, x):
    """Return ``A @ x`` after checking the inner dimension."""
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: A {A.shape} vs x {x.shape}")
    return A @ x


@dataclass(frozen=True)
class TridiagonalMatrix:
    """Band storage ``(sub, main, sup)`` of an N x N tridiagonal matrix."""

    sub: np.ndarray
    main: np.ndarray
    sup: np.ndarray

    def __post_init__(self):
        main = _as_vector(self.main, "main")
        sub = _as_vector(self.sub, "sub")
        sup = _as_vector(self.sup, "sup")
        n = main.shape[0]
        if n < 1:
            raise ValueError("tridiagonal matrix must have N >= 1")
        if sub.shape[0] != n - 1 or sup.shape[0] != n - 1:
            raise ValueError(
                f"band lengths {sub.shape[0]}, {n}, {sup.shape[0]} are inconsistent"
            )
        object.__setattr__(self, "main", main)
        object.__setattr__(self, "sub", sub)
        object.__setattr__(self, "sup", sup)

    @property
    def n(self) -> int:
        return self.main.shape[0]

    @classmethod
    def from_dense(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(np.diag(M, -1).copy(), np.diag(M).copy(), np.diag(M, 1).copy())

    def to_dense(self) -> np.ndarray:
        M = np.diag(self.main)
        if self.n > 1:
            M += np.diag(self.sub, -1) + np.diag(self.sup, 1)
        return M

    def transpose(self) -> "TridiagonalMatrix":
        return TridiagonalMatrix(self.sup, self.main, self.sub)

    def scale_rows(self, d) -> "TridiagonalMatrix":
        """``diag(d) @ T``."""
        d = np.asarray(d, dtype=np.float64)
        return TridiagonalMatrix(self.sub * d[1:], self.main * d, self.sup * d[:-1])

    def scale_cols(self, d) -> "TridiagonalMatrix":
        """``T @ diag(d)``."""
        d = np.asarray(d, dtype=np.float64)
        return TridiagonalMatrix(self.sub * d[:-1], self.main * d, self.sup * d[1:])

    def add_diagonal(self, d) -> "TridiagonalMatrix":
        return TridiagonalMatrix(self.sub, self.main + d, self.sup)

    def __matmul__(self, x):
        return tridiag_matvec(self, x)


def tridiag_matvec(T: TridiagonalMatrix, x):
    """Multiply by a tridiagonal matrix; ``x`` may carry extra trailing columns."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != T.n:
        raise ValueError(f"dimension mismatch: N={T.n} vs x {x.shape}")
    main = T.main.reshape((-1,) + (1,) * (x.ndim - 1))
    y = main * x
    if T.n > 1:
        sub = T.sub.reshape((-1,) + (1,) * (x.ndim - 1))
        sup = T.sup.reshape((-1,) + (1,) * (x.ndim - 1))
        y[1:] += sub * x[:-1]
        y[:-1] += sup * x[1:]
    return y


def _thomas_vector(a, d, c, x):
    """Thomas solve on Python lists, elimination fused with the pivot pass."""
    n = len(d)
    cp = [0.0] * n
    prev_c = prev_x = 0.0
    for i in range(n):
        ai = a[i - 1] if i else 0.0
        piv = d[i] - ai * prev_c
        if abs(piv) <= PIVOT_TOL:
            raise SingularMatrixError(f"pivot {piv:.3e} at row {i}")
        prev_x = x[i] = (x[i] - ai * prev_x) / piv
        if i < n - 1:
            prev_c = cp[i] = c[i] / piv
    for i in range(n - 2, -1, -1):
        x[i] -= cp[i] * x[i + 1]
    return x


def tridiag_solve(T: TridiagonalMatrix, b):
    """Solve ``T x = b`` with the Thomas algorithm (no pivoting).

    ``b`` may be a vector or an ``(N, k)`` block of right-hand sides.

    Raises
    ------
    SingularMatrixError
        If an elimination pivot has magnitude <= 1e-14.
    """
    b = np.asarray(b, dtype=np.float64)
    n = T.n
    if b.shape[0] != n:
        raise ValueError(f"dimension mismatch: N={n} vs b {b.shape}")
    # coefficients as Python floats: the row loop is scalar-bound
    a, d, c = T.sub.tolist(), T.main.tolist(), T.sup.tolist()
    if b.ndim == 1:
        return np.array(_thomas_vector(a, d, c, b.tolist()))
    cp = [0.0] * n
    inv = [0.0] * n
    for i in range(n):
        piv = d[i] - (a[i - 1] * cp[i - 1] if i else 0.0)
        if abs(piv) <= PIVOT_TOL:
            raise SingularMatrixError(f"pivot {piv:.3e} at row {i}")
        inv[i] = 1.0 / piv
        if i < n - 1:
            cp[i] = c[i] * inv[i]

    x = b.copy()
    x[0] *= inv[0]
    for i in range(1, n):
        x[i] -= a[i - 1] * x[i - 1]
        x[i] *= inv[i]
    for i in range(n - 2, -1, -1):
        x[i] -= cp[i] * x[i + 1]
    return x


# -- FFT ---------------------------------------------------------------------


def next_pow2(n: int) -> int:
    return 1 << max(int(n) - 1, 0).bit_length()


@functools.lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


@functools.lru_cache(maxsize=64)
def _twiddles(m: int, sign: int) -> np.ndarray:
    k = np.arange(m // 2)
    return np.exp(sign * 2j * np.pi * k / m)


def _radix2(x, sign):
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    y = x[..., _bit_reverse(n)]
    m = 2
    while m <= n:
        half = m // 2
        y = y.reshape(lead + (n // m, m))
        even = y[..., :half]
        odd = y[..., half:] * _twiddles(m, sign)
        y = np.concatenate([even + odd, even - odd], axis=-1)
        m *= 2
    return y.reshape(lead + (n,))


def fft(x):
    """Forward DFT along the last axis (iterative radix-2, power-of-two length)."""
    return _radix2(x, -1)


def ifft(X):
    """Inverse of :func:`fft`."""
    X = np.asarray(X)
    return _radix2(X, +1) / X.shape[-1]


def causal_convolve(kernel, u, backend="numpy"):
    """Non-circular convolution truncated to the input length.

    ``y[k] = sum_{i<=k} kernel[i] * u[k-i]``. Leading axes broadcast, so a
    bank of kernels can be applied to a batch of signals in one call. Both
    operands are zero-padded to the next power of two ``>= 2L - 1``.
    ``backend="numpy"`` uses the real FFT from ``numpy.fft``; ``"radix2"``
    uses :func:`fft` from this module.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    L = u.shape[-1]
    if kernel.shape[-1] != L:
        raise ValueError(f"length mismatch: kernel {kernel.shape[-1]} vs u {L}")
    if L < 1:
        raise ValueError("sequence length must be >= 1")
    nfft = next_pow2(2 * L - 1)
    if backend == "numpy":
        y = np.fft.irfft(np.fft.rfft(kernel, nfft) * np.fft.rfft(u, nfft), nfft)
        return y[..., :L]
    if backend != "radix2":
        raise ValueError(f"unknown FFT backend {backend!r}")
    pad = lambda a: np.concatenate(  # noqa: E731
        [a, np.zeros(a.shape[:-1] + (nfft - L,))], axis=-1
    )
    y = ifft(fft(pad(kernel)) * fft(pad(u)))
    return y.real[..., :L]


def causal_correlate(a, g, backend="numpy"):
    """Adjoint of causal convolution: ``r[j] = sum_{t>=j} a[t-j] * g[t]``.

    With ``y = causal_convolve(k, u)`` and upstream gradient ``g = dL/dy``,
    ``causal_correlate(u, g)`` is ``dL/dk`` and ``causal_correlate(k, g)`` is
    ``dL/du``.
    """
    g = np.asarray(g, dtype=np.float64)
    return causal_convolve(a, g[..., ::-1], backend)[..., ::-1]


# -- truncated power series ---------------------------------------------------


def poly_mul(p, q):
    """Exact product of coefficient arrays (ascending degree)."""
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    q = np.atleast_1d(np.asarray(q, dtype=np.float64))
    if p.size == 0 or q.size == 0:
        return np.zeros(0)
    n = p.size + q.size - 1
    if min(p.size, q.size) < POLY_FFT_THRESHOLD:
        return np.convolve(p, q)
    nfft = next_pow2(n)
    P = fft(np.concatenate([p, np.zeros(nfft - p.size)]))
    Q = fft(np.concatenate([q, np.zeros(nfft - q.size)]))
    return ifft(P * Q).real[:n]


def poly_inv_mod(p, L: int):
    """Return ``q`` with ``p * q == 1 (mod x^L)`` by Newton iteration."""
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    if L < 1:
        return np.zeros(0)
    if p.size == 0 or abs(p[0]) < 1e-300 or p[0] == 0.0:
        raise ZeroDivisionError("constant term of p is zero")
    q = np.array([1.0 / p[0]])
    m = 1
    while m < L:
        m = min(2 * m, L)
        e = np.zeros(m)
        prod = poly_mul(p[:m], q)[:m]
        e[:prod.size] = -prod
        e[0] += 2.0
        q = poly_mul(q, e)[:m]
    out = np.zeros(L)
    out[:q.size] = q[:L]
    return out


def _series_fft(a, nfft):
    pad = np.zeros(a.shape[:-1] + (nfft - a.shape[-1],))
    return fft(np.concatenate([a, pad], axis=-1))


def series_matmul(P, Q, L: int):
    """Product of matrices whose entries are power series, truncated mod x^L.

    ``P`` has shape ``(a, b, lp)`` and ``Q`` has shape ``(b, c, lq)``.
    """
    P = np.asarray(P, dtype=np.float64)[..., :L]
    Q = np.asarray(Q, dtype=np.float64)[..., :L]
    if P.shape[1] != Q.shape[0]:
        raise ValueError(f"inner dimension mismatch {P.shape} x {Q.shape}")
    if P.shape[1] == 0:
        return np.zeros((P.shape[0], Q.shape[1], L))
    n = P.shape[-1] + Q.shape[-1] - 1
    if min(P.shape[-1], Q.shape[-1]) < 16:
        out = np.zeros((P.shape[0], Q.shape[1], n))
        for i in range(P.shape[-1]):
            for j in range(Q.shape[-1]):
                out[..., i + j] += P[..., i] @ Q[..., j]
    else:
        nfft = next_pow2(n)
        Pf = _series_fft(P, nfft)
        Qf = _series_fft(Q, nfft)
        out = ifft(np.einsum("abf,bcf->acf", Pf, Qf)).real[..., :n]
    if n < L:
        out = np.concatenate([out, np.zeros(out.shape[:-1] + (L - n,))], axis=-1)
    return out[..., :L]


def series_matinv(F, L: int, tol: float = 1e-12):
    """Inverse of a square matrix of power series, mod x^L (Newton iteration).

    Raises
    ------
    SingularMatrixError
        If the constant-term matrix has smallest singular value below ``tol``.
    """
    F = np.asarray(F, dtype=np.float64)
    k = F.shape[0]
    F0 = F[..., 0]
    if k and np.linalg.svd(F0, compute_uv=False)[-1] < tol:
        raise SingularMatrixError("constant term of series matrix is singular")
    W = np.linalg.inv(F0)[..., None] if k else np.zeros((0, 0, 1))
    eye = np.eye(k)
    m = 1
    while m < L:
        m = min(2 * m, L)
        E = -series_matmul(F, W, m)
        E[..., 0] += 2.0 * eye
        W = series_matmul(W, E, m)
    return W[..., :L]


# -- structure tests ----------------------------------------------------------


def offdiag_rank(A, k_max: int, rtol: float = 1e-8) -> bool:
    """True iff every strictly off-diagonal corner block has numerical rank <= k_max.

    A block passes when its singular values past index ``k_max`` are all below
    ``rtol`` times its largest singular value.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("offdiag_rank needs a square matrix")
    n = A.shape[0]
    for i in range(n - 1):
        for block in (A[i + 1 :, : i + 1], A[: i + 1, i + 1 :]):
            s = np.linalg.svd(block, compute_uv=False)
            if s.size <= k_max or s[0] == 0.0:
                continue
            if np.any(s[k_max:] >= rtol * s[0]):
                return False
    return True
