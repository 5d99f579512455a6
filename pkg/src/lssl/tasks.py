"""Datasets and task generators.

IDX image files (the MNIST container format), a synthetic delay task, and a
scaled-Legendre memory demo that compresses a signal's history into ``N``
coefficients and reconstructs it.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .disc import backward_diff_structured, forward_diff_structured
from .hippo import structured_legs

__all__ = [
    "Dataset",
    "DataFormatError",
    "ReconstructionReport",
    "load_idx",
    "write_idx",
    "make_delay_task",
    "reconstruct_history",
    "legs_memory",
    "legendre_normalized",
    "resample_sequence",
    "write_dataset_csv",
    "read_signal_csv",
    "bandlimited_signal",
    "SPLITS",
    "TASK_KINDS",
]

SPLITS = ("train", "val", "test")
TASK_KINDS = ("classify", "regress")
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DataFormatError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Dataset:
    """Uniform-length sequences with per-sequence labels or per-step targets.

    ``X`` has shape ``(n, L)`` or ``(n, L, d)``. For classification ``y``
    holds ``n`` integer labels; for regression it holds target sequences.
    """

    X: np.ndarray
    y: np.ndarray
    split: str = "train"
    task_kind: str = "classify"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y)
        if self.X.ndim not in (2, 3):
            raise DataFormatError(f"X must be (n, L) or (n, L, d), got {self.X.shape}")
        if self.y.shape[:1] != self.X.shape[:1]:
            raise DataFormatError("X and y disagree on the number of sequences")
        if self.task_kind == "classify" and self.y.size and np.any(self.y < 0):
            raise DataFormatError("class labels must be non-negative")

    def __len__(self):
        return self.X.shape[0]

    @property
    def length(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        if self.task_kind != "classify":
            raise AttributeError("regression datasets have no classes")
        return int(self.meta.get("n_classes", int(self.y.max()) + 1 if self.y.size else 0))

    def subset(self, index, split=None) -> "Dataset":
        return Dataset(self.X[index], self.y[index], split or self.split, self.task_kind, dict(self.meta))


@dataclass(frozen=True)
class ReconstructionReport:
    N: int
    l2_error: float
    signal_id: str = ""


# -- IDX ---------------------------------------------------------------------------


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc


def _parse_idx(raw, magic, ndim, path):
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise DataFormatError(f"{path}: truncated IDX body ({len(body)} < {need} bytes)")
    return dims, np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path, limit=None, split="train") -> Dataset:
    """Read an IDX image/label pair as flattened sequences in ``[0, 1]``.

    Parameters
    ----------
    images_path, labels_path : path-like
        IDX files (optionally gzip-compressed, by ``.gz`` suffix).
    limit : int, optional
        Keep only the first ``limit`` examples.

    Raises
    ------
    DataFormatError
        Bad magic number, truncated file or mismatched counts.
    """
    (n_img, rows, cols), images = _parse_idx(_read_bytes(images_path), IDX_IMAGES, 3, images_path)
    (n_lab,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS, 1, labels_path)
    if n_img != n_lab:
        raise DataFormatError(f"{n_img} images but {n_lab} labels")
    if limit is not None:
        if limit < 0:
            raise ValueError(f"limit must be non-negative, got {limit}")
        images, labels = images[:limit], labels[:limit]
    X = images.reshape(images.shape[0], rows * cols).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), split, "classify",
                   {"rows": rows, "cols": cols, "n_classes": 10})


def write_idx(images_path, labels_path, images, labels):
    """Write ``uint8`` images ``(n, rows, cols)`` and labels ``(n,)`` as IDX."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ValueError("need images (n, rows, cols) and labels (n,)")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES, *images.shape))
        fh.write(images.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


# -- delay task ----------------------------------------------------------------------


def make_delay_task(L, delay, n, seed, split="train") -> Dataset:
    """White noise in ``[-1, 1]``; the target is the input delayed by ``delay`` steps."""
    if not 0 <= delay < L:
        raise ValueError(f"need 0 <= delay < L, got delay={delay}, L={L}")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, L))
    y = np.zeros_like(X)
    y[:, delay:] = X[:, :L - delay]
    return Dataset(X, y, split, "regress", {"delay": delay})


# -- memory demo ----------------------------------------------------------------------


def legendre_normalized(N, z):
    """``sqrt((2n+1)/2) P_n(z)`` for ``n < N`` via the three-term recurrence.

    Returns an ``(N, len(z))`` array; the rows are orthonormal on ``[-1, 1]``.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.empty((N,) + z.shape)
    p_prev, p = np.zeros_like(z), np.ones_like(z)
    for n in range(N):
        out[n] = np.sqrt(n + 0.5) * p
        p_prev, p = p, ((2 * n + 1) * z * p - n * p_prev) / (n + 1)
    return out


def legs_memory(u, N):
    """Final scaled-Legendre coefficients of the history of ``u``.

    ``u`` has shape ``(L,)`` or ``(L, k)`` (``k`` independent signals on a
    shared grid), giving ``(N,)`` or ``(N, k)``. Sample ``i`` sits at time
    ``(i + 1) dt``; the coefficients do not depend on ``dt``. The dynamics
    are ``x' = (1/t)(-A x + 2 b u)``. Their ``1/t`` term forces ``A x = 2 b u``
    as ``t -> 0``, so the state at the first sample is the projection of the
    constant ``u_0`` (only ``x_0`` nonzero). Later steps are bilinear with
    effective step ``dt / t``.
    """
    u = np.asarray(u, dtype=np.float64)
    if int(N) != N or N < 1:
        raise ValueError(f"N must be a positive integer, got {N}")
    if u.ndim not in (1, 2) or u.shape[0] < 2:
        raise ValueError(f"need at least two samples along axis 0, got shape {u.shape}")
    N = int(N)
    S = structured_legs(N)
    b2 = 2.0 * np.sqrt(np.arange(N) + 0.5)
    if u.ndim == 2:
        b2 = b2[:, None]
    x = np.zeros((N,) + u.shape[1:])
    x[0] = np.sqrt(2.0) * u[0]
    for k in range(1, u.shape[0]):
        step = 1.0 / (k + 1)  # dt / t_k
        v = forward_diff_structured(S, -0.5 * step, x) + step * b2 * u[k]
        x = backward_diff_structured(S, 0.5 * step, v)
    return x


def reconstruct_history(u, dt, N, signal_id=""):
    """Compress ``u`` online into ``N`` scaled-Legendre coefficients and rebuild it.

    See :func:`legs_memory` for the dynamics. The reconstruction evaluates
    the coefficient expansion on the sample grid ``t_k = (k + 1) dt``.

    Returns
    -------
    x_T : ndarray, shape (N,)
    reconstruction : ndarray, shape (L,)
    report : ReconstructionReport
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = legs_memory(u, N)
    T = u.size * dt
    s = (np.arange(u.size) + 1.0) * dt
    rec = x @ legendre_normalized(int(N), 2.0 * s / T - 1.0)
    norm = np.linalg.norm(u)
    err = np.linalg.norm(u - rec) / norm if norm > 0 else np.linalg.norm(rec)
    return x, rec, ReconstructionReport(int(N), float(err), signal_id)


def bandlimited_signal(L=1000, n_terms=6, max_cycles=10.0, seed=0):
    """Fixed random sum of low-frequency sinusoids sampled at ``L`` points on ``(0, 1]``."""
    rng = np.random.default_rng(seed)
    t = (np.arange(L) + 1.0) / L
    freq = rng.uniform(0.5, max_cycles, size=n_terms)
    phase = rng.uniform(0, 2 * np.pi, size=n_terms)
    amp = rng.normal(size=n_terms)
    return np.sum(amp[:, None] * np.sin(2 * np.pi * freq[:, None] * t + phase[:, None]), axis=0)


# -- resampling and CSV ---------------------------------------------------------------


def resample_sequence(u, factor):
    """Change the sampling rate by ``factor`` in ``{1/2, 1, 2}``.

    ``1/2`` keeps every other sample. ``2`` inserts linear midpoints and
    repeats the last sample, so decimating the result returns ``u`` exactly.
    Works along axis 0.
    """
    u = np.asarray(u, dtype=np.float64)
    f = Fraction(factor).limit_denominator(16)
    if f == 1:
        return u.copy()
    if f == Fraction(1, 2):
        return u[::2].copy()
    if f == 2:
        out = np.empty((2 * u.shape[0],) + u.shape[1:])
        out[0::2] = u
        out[1:-1:2] = 0.5 * (u[:-1] + u[1:])
        out[-1] = u[-1]
        return out
    raise ValueError(f"unsupported resampling factor {factor}; use 1/2, 1 or 2")


def write_dataset_csv(path, dataset: Dataset):
    """One row per sequence: the label, then the ``L`` input values.

    Regression rows carry the ``L`` target values after the inputs instead of
    a leading label.
    """
    X = dataset.X.reshape(len(dataset), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for i in range(len(dataset)):
            if dataset.task_kind == "classify":
                w.writerow([int(dataset.y[i])] + [repr(float(v)) for v in X[i]])
            else:
                w.writerow([repr(float(v)) for v in X[i]]
                           + [repr(float(v)) for v in np.ravel(dataset.y[i])])


def read_signal_csv(path):
    """All numeric cells of a CSV file, row-major, as one signal."""
    values = []
    try:
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                for cell in row:
                    cell = cell.strip()
                    if cell:
                        values.append(float(cell))
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric cell ({exc})") from exc
    if len(values) < 2:
        raise DataFormatError(f"{path}: need at least two samples")
    return np.array(values)
