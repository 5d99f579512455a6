"""HiPPO state matrices.

All matrices are returned in their positive-entry form (e.g. LegS has
diagonal ``n + 1``). A state-space layer uses the dynamics
``x' = -A x + b u``, so callers negate ``A`` before discretizing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import TridiagonalMatrix, tridiag_solve

__all__ = [
    "HippoSystem",
    "StructuredStateMatrix",
    "legs_matrix",
    "legt_matrix",
    "lagt_matrix",
    "jacobi_matrix",
    "jacobi_factors",
    "jacobi_norm",
    "structured_legs",
    "structured_legt",
    "structured_lagt",
    "hippo_system",
    "structured_system",
    "FAMILIES",
]

FAMILIES = ("legs", "legt", "lagt", "jacobi")
JACOBI_MAX_N = 256


@dataclass(frozen=True)
class HippoSystem:
    A: np.ndarray
    b: np.ndarray
    family: str
    params: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.b.shape[0]


@dataclass(frozen=True)
class StructuredStateMatrix:
    """``P (D + T^{-1}) Q`` with diagonal ``P, D, Q`` and tridiagonal ``T``.

    ``P``, ``D`` and ``Q`` are stored as their diagonals.
    """

    P: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    T: TridiagonalMatrix

    def __post_init__(self):
        n = self.T.n
        for name in ("P", "D", "Q"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {v.shape}")
            object.__setattr__(self, name, v)
        if np.any(self.P == 0) or np.any(self.Q == 0):
            raise ValueError("P and Q must have nonzero diagonals")

    @property
    def n(self) -> int:
        return self.T.n

    def matvec(self, x):
        x = np.asarray(x, dtype=np.float64)
        col = (-1,) + (1,) * (x.ndim - 1)
        qx = self.Q.reshape(col) * x
        return self.P.reshape(col) * (self.D.reshape(col) * qx + tridiag_solve(self.T, qx))

    def to_dense(self) -> np.ndarray:
        Tinv = tridiag_solve(self.T, np.eye(self.n))
        return self.P[:, None] * (np.diag(self.D) + Tinv) * self.Q[None, :]

    def __neg__(self) -> "StructuredStateMatrix":
        return StructuredStateMatrix(-self.P, self.D, self.Q, self.T)


def _check_order(N):
    if int(N) != N or N < 1:
        raise ValueError(f"state order must be a positive integer, got {N}")
    return int(N)


def legs_matrix(N: int) -> HippoSystem:
    """Scaled-Legendre (LegS) matrix; ``b[n] = sqrt(2n+1)``."""
    N = _check_order(N)
    r = np.sqrt(2.0 * np.arange(N) + 1.0)
    A = np.tril(np.outer(r, r), -1) + np.diag(np.arange(N) + 1.0)
    return HippoSystem(A, r.copy(), "legs")


def legt_matrix(N: int) -> HippoSystem:
    """Translated-Legendre (LegT) matrix; ``b[n] = sqrt((2n+1)/2)``."""
    N = _check_order(N)
    n = np.arange(N)
    r = np.sqrt(2.0 * n + 1.0)
    sign = np.where(n[:, None] >= n[None, :], 1.0, (-1.0) ** (n[:, None] - n[None, :]))
    A = np.outer(r, r) * sign
    return HippoSystem(A, np.sqrt((2.0 * n + 1.0) / 2.0), "legt")


def lagt_matrix(N: int, beta: float = 1.0) -> HippoSystem:
    """Translated-Laguerre (LagT) matrix with the generalized parameter fixed at 0."""
    N = _check_order(N)
    if not beta > -1:
        raise ValueError(f"beta must be > -1, got {beta}")
    A = np.tril(np.ones((N, N)), -1) + 0.5 * (1.0 + beta) * np.eye(N)
    return HippoSystem(A, np.ones(N), "lagt", {"alpha": 0.0, "beta": float(beta)})


# -- Jacobi -------------------------------------------------------------------


def _check_jacobi(N, alpha, beta):
    N = _check_order(N)
    if N > JACOBI_MAX_N:
        raise ValueError(f"jacobi_matrix supports N <= {JACOBI_MAX_N}, got {N}")
    if not (alpha > -1 and beta > -1):
        raise ValueError(f"need alpha, beta > -1, got ({alpha}, {beta})")
    return N


def jacobi_norm(N: int, alpha: float, beta: float) -> np.ndarray:
    """``lambda_n``: L2 norm of the n-th Jacobi polynomial under its weight."""
    N = _check_jacobi(N, alpha, beta)
    s = alpha + beta
    lg = math.lgamma
    out = np.empty(N)
    # n = 0 folds (s+1) * Gamma(s+1) into Gamma(s+2), which stays finite at s = -1
    out[0] = 0.5 * ((s + 1) * math.log(2.0) + lg(alpha + 1) + lg(beta + 1) - lg(s + 2))
    for n in range(1, N):
        out[n] = 0.5 * (
            (s + 1) * math.log(2.0)
            - math.log(2 * n + s + 1)
            + lg(n + alpha + 1)
            + lg(n + beta + 1)
            - lg(n + s + 1)
            - lg(n + 1)
        )
    return np.exp(out)


def jacobi_factors(N: int, alpha: float, beta: float) -> dict:
    """Diagonal factors with ``A = D11 Q1 D12 - D21 Q1 D22 + 2 D3 Q2 D3``.

    ``Q1`` is the strictly-lower all-ones matrix and ``Q2`` the all-ones
    matrix. Also returns ``lam`` (norms) and ``b`` (normalized polynomials at
    ``z = 1``).
    """
    N = _check_jacobi(N, alpha, beta)
    s = alpha + beta
    lg = math.lgamma
    lam = jacobi_norm(N, alpha, beta)
    n = np.arange(N)
    sign = (-1.0) ** n

    # (2k+s+1) Gamma(k+s+1), in log form; k = 0 uses Gamma(s+2)
    lead = np.array(
        [lg(s + 2)] + [math.log(2 * k + s + 1) + lg(k + s + 1) for k in range(1, N)]
    )
    lg_a = np.array([lg(k + alpha + 1) for k in range(N)])
    lg_b = np.array([lg(k + beta + 1) for k in range(N)])
    lg_s = np.array([0.0] + [lg(k + s + 1) for k in range(1, N)])

    # row 0 of Q1 is empty, so D11[0] and D21[0] never contribute
    D11 = np.exp(lg_b - lg_s) / lam
    D21 = sign * np.exp(lg_a - lg_s) / lam
    D11[0] = D21[0] = 0.0
    D12 = np.exp(lead - lg_b) * lam
    D22 = sign * np.exp(lead - lg_a) * lam

    lg_fact = np.array([lg(k + 1) for k in range(N)])
    binom_b = np.exp(lg_b - lg_fact - lg(beta + 1))
    binom_a = np.exp(lg_a - lg_fact - lg(alpha + 1))
    D3 = sign * binom_b / lam
    b = binom_a / lam
    return {"D11": D11, "D12": D12, "D21": D21, "D22": D22, "D3": D3, "lam": lam, "b": b}


def jacobi_matrix(N: int, alpha: float, beta: float) -> HippoSystem:
    """Translated HiPPO matrix for the Jacobi weight ``(1-z)^alpha (1+z)^beta``."""
    f = jacobi_factors(N, alpha, beta)
    Q1 = np.tril(np.ones((N, N)), -1)
    A1 = f["D11"][:, None] * Q1 * f["D12"][None, :] - f["D21"][:, None] * Q1 * f["D22"][None, :]
    A2 = np.outer(f["D3"], f["D3"])
    A = A1 + 2.0 * A2
    if not np.all(np.isfinite(A)):
        raise OverflowError("non-finite entries in Jacobi HiPPO matrix")
    return HippoSystem(A, f["b"], "jacobi", {"alpha": float(alpha), "beta": float(beta)})


# -- structured forms ---------------------------------------------------------


def _unit_lower_bidiagonal(N):
    return TridiagonalMatrix(-np.ones(N - 1), np.ones(N), np.zeros(N - 1))


def structured_legs(N: int) -> StructuredStateMatrix:
    N = _check_order(N)
    n = np.arange(N, dtype=np.float64)
    r = np.sqrt(2 * n + 1)
    return StructuredStateMatrix(r, -n / (2 * n + 1), r.copy(), _unit_lower_bidiagonal(N))


def structured_legt(N: int) -> StructuredStateMatrix:
    N = _check_order(N)
    r = np.sqrt(2.0 * np.arange(N) + 1.0)
    main = np.zeros(N)
    main[0] += 0.5
    main[-1] += 0.5
    T = TridiagonalMatrix(-0.5 * np.ones(N - 1), main, 0.5 * np.ones(N - 1))
    return StructuredStateMatrix(r, np.zeros(N), r.copy(), T)


def structured_lagt(N: int, beta: float = 1.0) -> StructuredStateMatrix:
    N = _check_order(N)
    if not beta > -1:
        raise ValueError(f"beta must be > -1, got {beta}")
    ones = np.ones(N)
    return StructuredStateMatrix(ones, 0.5 * (beta - 1.0) * ones, ones.copy(), _unit_lower_bidiagonal(N))


def hippo_system(family: str, N: int, **params) -> HippoSystem:
    family = family.lower()
    if family == "legs":
        return legs_matrix(N)
    if family == "legt":
        return legt_matrix(N)
    if family == "lagt":
        return lagt_matrix(N, params.get("beta", 1.0))
    if family == "jacobi":
        return jacobi_matrix(N, params.get("alpha", 0.0), params.get("beta", 0.0))
    raise ValueError(f"unknown HiPPO family {family!r}; expected one of {FAMILIES}")


def structured_system(family: str, N: int, **params) -> StructuredStateMatrix:
    family = family.lower()
    if family == "legs":
        return structured_legs(N)
    if family == "legt":
        return structured_legt(N)
    if family == "lagt":
        return structured_lagt(N, params.get("beta", 1.0))
    raise ValueError(f"no tridiagonal-inverse form for family {family!r}")
