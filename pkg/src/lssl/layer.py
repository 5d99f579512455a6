"""Deep LSSL: encoder, stacked state-space layers, pooled decoder.

Array layout is ``(batch, length, features)`` throughout. Each layer runs
``H`` independent single-input SSMs that share one state matrix ``A`` but
have their own ``B``, ``C``, ``D`` and timestep, then mixes the ``H * M``
channels back to ``H`` with a position-wise linear map.
"""

from __future__ import annotations

import copy
import struct
from typing import Optional

import numpy as np

from .disc import bilinear_matrix_structured, gbt_discretize
from .hippo import StructuredStateMatrix, hippo_system, structured_system
from .kernel import krylov_matrix
from .linalg import causal_convolve

__all__ = [
    "GELU_COEF",
    "LsslLayer",
    "LsslModel",
    "init_layer",
    "init_model",
    "layer_forward",
    "model_forward",
    "adapt_timescale",
    "gelu",
    "gelu_grad",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "MODES",
    "NORMS",
    "POOLINGS",
]

GELU_COEF = 0.7978845608  # sqrt(2 / pi), tanh approximation
GELU_CUBIC = 0.044715
LN_EPS = 1e-5

MODES = ("fixed", "full")
NORMS = ("post", "pre")
POOLINGS = ("mean", "last", "none")
MAGIC = b"LSSL0001"


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_COEF * (x + GELU_CUBIC * x**3)))


def gelu_grad(x):
    t = np.tanh(GELU_COEF * (x + GELU_CUBIC * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_COEF * (1.0 + 3 * GELU_CUBIC * x * x)


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


class LsslLayer:
    """One LSSL block.

    ``A`` is stored in the dynamics convention ``x' = A x + B u`` (so it is
    the negated HiPPO matrix) and may be dense or a
    :class:`StructuredStateMatrix`. Timesteps are kept as ``log_dt`` so that
    training them keeps them positive.
    """

    def __init__(self, A, B, C, D, log_dt, ff_weight, ff_bias, norm_gain, norm_bias,
                 mode="fixed", norm="post"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")
        self.A = A if isinstance(A, StructuredStateMatrix) else np.array(A, dtype=np.float64)
        self.B = np.array(B, dtype=np.float64)
        self.C = np.array(C, dtype=np.float64)
        self.D = np.array(D, dtype=np.float64)
        self.log_dt = np.array(log_dt, dtype=np.float64)
        self.ff_weight = np.array(ff_weight, dtype=np.float64)
        self.ff_bias = np.array(ff_bias, dtype=np.float64)
        self.norm_gain = np.array(norm_gain, dtype=np.float64)
        self.norm_bias = np.array(norm_bias, dtype=np.float64)
        self.mode = mode
        self.norm = norm
        H, M, N = self.C.shape
        if self.B.shape != (H, N) or self.D.shape != (H, M) or self.log_dt.shape != (H,):
            raise ValueError("inconsistent per-feature parameter shapes")
        if self.ff_weight.shape != (H, H * M) or self.ff_bias.shape != (H,):
            raise ValueError("feedforward must map H*M -> H")
        if self.n_state != N:
            raise ValueError("state matrix order does not match C")
        if mode == "fixed":
            for arr in self._frozen_arrays():
                arr.flags.writeable = False
        self._disc = None
        self._krylov = {}

    def _frozen_arrays(self):
        arrs = [self.B, self.log_dt]
        if isinstance(self.A, StructuredStateMatrix):
            arrs += [self.A.P, self.A.D, self.A.Q, self.A.T.sub, self.A.T.main, self.A.T.sup]
        else:
            arrs.append(self.A)
        return arrs

    # -- shapes and parameters ----------------------------------------------

    @property
    def H(self) -> int:
        return self.C.shape[0]

    @property
    def M(self) -> int:
        return self.C.shape[1]

    @property
    def n_state(self) -> int:
        return self.A.n if isinstance(self.A, StructuredStateMatrix) else self.A.shape[0]

    @property
    def dt(self):
        return np.exp(self.log_dt)

    def dense_A(self):
        return self.A.to_dense() if isinstance(self.A, StructuredStateMatrix) else self.A

    def parameters(self, trainable_only=False):
        """Name -> live array, in checkpoint declaration order for the shared part."""
        p = {}
        if not trainable_only or self.mode == "full":
            if isinstance(self.A, StructuredStateMatrix):
                p.update({"A.P": self.A.P, "A.D": self.A.D, "A.Q": self.A.Q,
                          "A.T.sub": self.A.T.sub, "A.T.main": self.A.T.main,
                          "A.T.sup": self.A.T.sup})
            else:
                p["A"] = self.A
        if not trainable_only:
            p["B"] = self.B
        p["C"] = self.C
        p["D"] = self.D
        if not trainable_only or self.mode == "full":
            p["log_dt"] = self.log_dt
        p.update({"ff_weight": self.ff_weight, "ff_bias": self.ff_bias,
                  "norm_gain": self.norm_gain, "norm_bias": self.norm_bias})
        return p

    def invalidate(self):
        self._disc = None
        self._krylov = {}

    # -- cached SSM quantities ------------------------------------------------

    def discretized(self):
        """Per-feature bilinear ``(a_bar (H,N,N), b_bar (H,N))``, cached."""
        if self._disc is None:
            dts = self.dt
            a_bar = np.empty((self.H, self.n_state, self.n_state))
            b_bar = np.empty((self.H, self.n_state))
            for h in range(self.H):
                if isinstance(self.A, StructuredStateMatrix):
                    a_bar[h], b_bar[h] = bilinear_matrix_structured(self.A, self.B[h], dts[h])
                else:
                    a_bar[h], b_bar[h] = gbt_discretize(self.A, self.B[h], dts[h], 0.5)
            self._disc = (a_bar, b_bar)
        return self._disc

    def krylov(self, L: int):
        """Cached ``(H, N, L)`` Krylov matrices."""
        if L not in self._krylov:
            a_bar, b_bar = self.discretized()
            self._krylov[L] = krylov_matrix(a_bar, b_bar, L)
        return self._krylov[L]

    def kernel(self, L: int):
        """``(H, M, L)`` convolution kernels ``C_h K(a_bar_h, b_bar_h)``."""
        return np.einsum("hmn,hnl->hml", self.C, self.krylov(L))


class LsslModel:
    def __init__(self, enc_weight, enc_bias, layers, dec_weight, dec_bias, pooling="mean"):
        if pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
        self.enc_weight = np.array(enc_weight, dtype=np.float64)
        self.enc_bias = np.array(enc_bias, dtype=np.float64)
        self.layers = list(layers)
        self.dec_weight = np.array(dec_weight, dtype=np.float64)
        self.dec_bias = np.array(dec_bias, dtype=np.float64)
        self.pooling = pooling
        H = self.enc_weight.shape[0]
        if any(layer.H != H for layer in self.layers) or self.dec_weight.shape[1] != H:
            raise ValueError("inconsistent hidden width across model")

    @property
    def H(self):
        return self.enc_weight.shape[0]

    @property
    def input_dim(self):
        return self.enc_weight.shape[1]

    @property
    def classes(self):
        return self.dec_weight.shape[0]

    @property
    def mode(self):
        return self.layers[0].mode if self.layers else "fixed"

    def parameters(self, trainable_only=False):
        p = {"encoder.weight": self.enc_weight, "encoder.bias": self.enc_bias}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters(trainable_only).items():
                p[f"layers.{i}.{k}"] = v
        p["decoder.weight"] = self.dec_weight
        p["decoder.bias"] = self.dec_bias
        return p

    def update(self, values: dict):
        """Copy new values into the named parameters and drop stale caches."""
        params = self.parameters()
        stale = set()
        for k, v in values.items():
            np.copyto(params[k], v)
            parts = k.split(".")
            if parts[0] == "layers" and parts[2] in ("A", "B", "log_dt"):
                stale.add(int(parts[1]))
        for i in stale:
            self.layers[i].invalidate()

    def n_parameters(self, trainable_only=True):
        return int(sum(v.size for v in self.parameters(trainable_only).values()))


# -- initialization ---------------------------------------------------------------


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def init_layer(H, N, M=1, dt_min=1e-3, dt_max=1e-1, seed=0, family="legs",
               mode="fixed", norm="post", structured=True) -> LsslLayer:
    """Build a layer with ``A = -hippo(family)`` and log-uniform timesteps."""
    if not 0 < dt_min <= dt_max:
        raise ValueError(f"need 0 < dt_min <= dt_max, got ({dt_min}, {dt_max})")
    rng = _rng(seed)
    hs = hippo_system(family, N)
    if structured and family in ("legs", "legt", "lagt"):
        A = -structured_system(family, N)
    else:
        A = -hs.A
    log_dt = rng.uniform(np.log(dt_min), np.log(dt_max), size=H)
    bound = 1.0 / np.sqrt(N)
    C = rng.uniform(-bound, bound, size=(H, M, N))
    ff_bound = 1.0 / np.sqrt(H * M)
    ff_weight = rng.uniform(-ff_bound, ff_bound, size=(H, H * M))
    return LsslLayer(
        A, np.tile(hs.b, (H, 1)), C, np.zeros((H, M)), log_dt,
        ff_weight, np.zeros(H), np.ones(H), np.zeros(H), mode=mode, norm=norm,
    )


def init_model(input_dim, classes, H=32, N=64, M=1, depth=2, dt_min=1e-3, dt_max=1e-1,
               seed=0, family="legs", mode="fixed", norm="post", pooling="mean",
               structured=True) -> LsslModel:
    ss = np.random.SeedSequence(seed)
    enc_ss, dec_ss, *layer_ss = ss.spawn(depth + 2)
    enc_rng = np.random.default_rng(enc_ss)
    dec_rng = np.random.default_rng(dec_ss)
    eb = 1.0 / np.sqrt(input_dim)
    db = 1.0 / np.sqrt(H)
    layers = [
        init_layer(H, N, M, dt_min, dt_max, np.random.default_rng(s), family, mode, norm, structured)
        for s in layer_ss
    ]
    return LsslModel(
        enc_rng.uniform(-eb, eb, size=(H, input_dim)), np.zeros(H), layers,
        dec_rng.uniform(-db, db, size=(classes, H)), np.zeros(classes), pooling,
    )


# -- forward -----------------------------------------------------------------------


def ssm_conv(layer: LsslLayer, s):
    """SSM outputs ``(batch, L, H, M)`` for inputs ``s (batch, L, H)`` by FFT."""
    K = layer.kernel(s.shape[1])
    st = np.transpose(s, (0, 2, 1))[:, :, None, :]
    y = causal_convolve(K[None], st) + layer.D[None, :, :, None] * st
    return np.transpose(y, (0, 3, 1, 2))


def ssm_rec(layer: LsslLayer, s):
    """Same as :func:`ssm_conv` via the sequential recurrence."""
    a_bar, b_bar = layer.discretized()
    batch, L, H = s.shape
    x = np.zeros((batch, H, layer.n_state))
    y = np.empty((batch, L, H, layer.M))
    for t in range(L):
        ut = s[:, t, :]
        x = np.einsum("hnk,bhk->bhn", a_bar, x) + b_bar[None] * ut[:, :, None]
        y[:, t] = np.einsum("hmn,bhn->bhm", layer.C, x) + layer.D[None] * ut[:, :, None]
    return y


def _check_mode(mode):
    mode = mode.lower()
    if mode not in ("conv", "rec"):
        raise ValueError(f"mode must be 'conv' or 'rec', got {mode!r}")
    return mode


def layer_forward(layer: LsslLayer, u, mode="conv", cache: Optional[dict] = None):
    """Apply one block to ``u (batch, L, H)``.

    PostNorm: ``LN(u + FF(gelu(SSM(u))))``; PreNorm: ``u + FF(gelu(SSM(LN(u))))``.
    When ``cache`` is a dict it is filled with the intermediates the backward
    pass needs.
    """
    mode = _check_mode(mode)
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 3 or u.shape[2] != layer.H:
        raise ValueError(f"expected (batch, L, {layer.H}) input, got {u.shape}")
    if layer.norm == "pre":
        s, ln = layer_norm(u, layer.norm_gain, layer.norm_bias)
    else:
        s, ln = u, None
    v = ssm_conv(layer, s) if mode == "conv" else ssm_rec(layer, s)
    g = gelu(v).reshape(v.shape[0], v.shape[1], -1)
    f = g @ layer.ff_weight.T + layer.ff_bias
    if layer.norm == "pre":
        out = u + f
    else:
        out, ln = layer_norm(u + f, layer.norm_gain, layer.norm_bias)
    if cache is not None:
        cache.update(u=u, s=s, v=v, g=g, ln=ln)
    return out


def model_forward(model: LsslModel, X, mode="conv", caches: Optional[list] = None):
    """Logits ``(batch, classes)``, or ``(batch, L, classes)`` without pooling."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3 or X.shape[2] != model.input_dim:
        raise ValueError(f"expected (batch, L, {model.input_dim}) input, got {X.shape}")
    z = X @ model.enc_weight.T + model.enc_bias
    for layer in model.layers:
        c = {} if caches is not None else None
        z = layer_forward(layer, z, mode, c)
        if caches is not None:
            caches.append(c)
    if model.pooling == "mean":
        pooled = z.mean(axis=1)
    elif model.pooling == "last":
        pooled = z[:, -1]
    else:
        pooled = z
    if caches is not None:
        caches.append({"X": X, "z": z})
    return pooled @ model.dec_weight.T + model.dec_bias


def adapt_timescale(model: LsslModel, factor: float) -> LsslModel:
    """Copy of ``model`` with every timestep multiplied by ``factor``."""
    if not factor > 0:
        raise ValueError(f"factor must be positive, got {factor}")
    new = copy.deepcopy(model)
    for layer in new.layers:
        layer.log_dt = layer.log_dt + np.log(factor)
        if layer.mode == "fixed":
            # deepcopy returns writeable arrays
            for arr in layer._frozen_arrays():
                arr.flags.writeable = False
        layer.invalidate()
    return new


# -- checkpoint ---------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def _checkpoint_tensors(model: LsslModel):
    out = [model.enc_weight, model.enc_bias]
    for layer in model.layers:
        out += [layer.dense_A(), layer.B, layer.C, layer.D, layer.dt,
                layer.ff_weight, layer.ff_bias, layer.norm_gain, layer.norm_bias]
    return out + [model.dec_weight, model.dec_bias]


def save_checkpoint(model: LsslModel, path):
    """Write ``LSSL0001``, eight little-endian u32 header fields, then f64 tensors."""
    first = model.layers[0] if model.layers else None
    header = (
        model.H,
        first.n_state if first else 0,
        first.M if first else 0,
        len(model.layers),
        model.classes,
        model.input_dim,
        MODES.index(model.mode),
        NORMS.index(first.norm if first else "post"),
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<8I", *header))
        for t in _checkpoint_tensors(model):
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path, pooling="mean") -> LsslModel:
    """Inverse of :func:`save_checkpoint`; the state matrix comes back dense."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if len(raw) < 40:
        raise CheckpointError("truncated checkpoint header")
    H, N, M, depth, classes, input_dim, mode, norm = struct.unpack("<8I", raw[8:40])
    if mode >= len(MODES) or norm >= len(NORMS):
        raise CheckpointError("unknown mode or norm code")
    data = np.frombuffer(raw, dtype="<f8", offset=40)
    pos = 0

    def take(*shape):
        nonlocal pos
        size = int(np.prod(shape))
        if pos + size > data.size:
            raise CheckpointError("truncated checkpoint body")
        arr = data[pos:pos + size].reshape(shape).astype(np.float64)
        pos += size
        return arr

    enc_w, enc_b = take(H, input_dim), take(H)
    layers = []
    for _ in range(depth):
        A, B, C, D, dt = take(N, N), take(H, N), take(H, M, N), take(H, M), take(H)
        ffw, ffb, g, b = take(H, H * M), take(H), take(H), take(H)
        layers.append(LsslLayer(A, B, C, D, np.log(dt), ffw, ffb, g, b,
                                mode=MODES[mode], norm=NORMS[norm]))
    dec_w, dec_b = take(classes, H), take(classes)
    if pos != data.size:
        raise CheckpointError("trailing bytes in checkpoint")
    return LsslModel(enc_w, enc_b, layers, dec_w, dec_b, pooling)
