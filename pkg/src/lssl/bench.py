"""Wall-clock comparison of kernel and state-update algorithms."""

from __future__ import annotations

import time

import numpy as np

from .disc import (backward_diff, backward_diff_structured, bilinear_matrix_structured,
                   factor_backward, forward_diff, forward_diff_structured)
from .hippo import structured_legs
from .kernel import RESOLVENT_MAX_L, RESOLVENT_MAX_N, krylov_matrix, resolvent_kernel_fast

__all__ = ["median_time", "naive_krylov", "run_bench", "BENCH_HEADER"]

BENCH_HEADER = "method,N,L,median_seconds"


def median_time(fn, repeats=5, clock=time.perf_counter):
    times = []
    for _ in range(repeats):
        t0 = clock()
        fn()
        times.append(clock() - t0)
    return float(np.median(times))


def naive_krylov(a_bar, b_bar, L):
    """Krylov columns by ``L - 1`` sequential matrix-vector products."""
    out = np.empty((b_bar.shape[0], L))
    x = b_bar
    for i in range(L):
        out[:, i] = x
        x = a_bar @ x
    return out


def run_bench(Ns=(16, 32, 64, 128), Ls=(256, 1024, 4096), repeats=5, dt=1e-2, seed=0):
    """Rows ``(method, N, L, median_seconds)`` on discretized LegS systems.

    Kernel methods are timed for each ``(N, L)``; the fast resolvent only
    where its size limits allow. The two ``*_step`` rows time one bilinear
    state update at a fresh timestep (``L = 0``): the structured path costs
    O(N) while the dense one must refactor ``I - dt/2 A``.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for N in Ns:
        S = -structured_legs(N)
        A = S.to_dense()
        b = np.sqrt(2.0 * np.arange(N) + 1.0)
        a_bar, b_bar = bilinear_matrix_structured(S, b, dt)
        c = rng.normal(size=N)
        for L in Ls:
            rows.append(("naive_unroll", N, L, median_time(lambda: c @ naive_krylov(a_bar, b_bar, L), repeats)))
            rows.append(("squaring", N, L, median_time(lambda: c @ krylov_matrix(a_bar, b_bar, L), repeats)))
            if N <= RESOLVENT_MAX_N and not N & (N - 1) and L <= RESOLVENT_MAX_L:
                rows.append(("fast_resolvent", N, L,
                             median_time(lambda: resolvent_kernel_fast(a_bar, b_bar, c, L), repeats)))
        x = rng.normal(size=N)

        def dense_step():
            lu = factor_backward(A, -0.5 * dt)
            return backward_diff(A, -0.5 * dt, forward_diff(A, 0.5 * dt, x), lu=lu)

        def structured_step():
            return backward_diff_structured(S, -0.5 * dt, forward_diff_structured(S, 0.5 * dt, x))

        rows.append(("structured_step", N, 0, median_time(structured_step, repeats)))
        rows.append(("dense_step", N, 0, median_time(dense_step, repeats)))
    return rows
