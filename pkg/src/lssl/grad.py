"""Reverse-mode gradients for :class:`~lssl.layer.LsslModel`.

The convolutional path is differentiated directly: the kernel is linear in
``C`` through the cached Krylov matrix, and the adjoint of a causal
convolution is a causal correlation. Timestep and state-matrix gradients
(full mode only) are obtained by unrolling the bilinear recurrence and
chaining the difference-map adjoints step by step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import disc
from .hippo import StructuredStateMatrix
from .layer import LsslLayer, LsslModel, gelu_grad, model_forward
from .linalg import causal_correlate, tridiag_solve

__all__ = [
    "LOSSES",
    "loss_and_grad",
    "model_backward",
    "recurrent_param_grads",
    "structured_grads",
    "AdamState",
    "adam_step",
    "finite_difference",
    "relative_error",
]

LOSSES = ("cross_entropy", "mse")


def _check_loss(loss):
    loss = loss.lower()
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {LOSSES}, got {loss!r}")
    return loss


def loss_and_grad(pred, target, loss):
    """Mean loss over all predictions and its gradient w.r.t. ``pred``."""
    loss = _check_loss(loss)
    if loss == "mse":
        target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
        diff = pred - target
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    labels = np.asarray(target)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("cross-entropy needs integer class labels")
    flat = pred.reshape(-1, pred.shape[-1])
    labels = labels.reshape(-1)
    if labels.shape[0] != flat.shape[0]:
        raise ValueError("label count does not match predictions")
    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(flat.shape[0])
    value = float(np.mean(logz - shifted[rows, labels]))
    probs = np.exp(shifted - logz[:, None])
    probs[rows, labels] -= 1.0
    return value, (probs / flat.shape[0]).reshape(pred.shape)


def _layer_norm_backward(dout, xhat, rstd, gain):
    dxhat = dout * gain
    H = xhat.shape[-1]
    dx = rstd / H * (H * dxhat - dxhat.sum(-1, keepdims=True)
                     - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    dgain = (dout * xhat).sum(axis=(0, 1))
    dbias = dout.sum(axis=(0, 1))
    return dx, dgain, dbias


def _ssm_backward(layer: LsslLayer, s, dv):
    """Adjoints of the SSM map ``s (b,L,H) -> v (b,L,H,M)``: ``(ds, dC, dD)``."""
    L = s.shape[1]
    Kr = layer.krylov(L)
    K = np.einsum("hmn,hnl->hml", layer.C, Kr)
    st = np.transpose(s, (0, 2, 1))[:, :, None, :]  # (b,H,1,L)
    gt = np.transpose(dv, (0, 2, 3, 1))  # (b,H,M,L)
    dK = causal_correlate(st, gt).sum(axis=0)  # (H,M,L)
    dC = np.einsum("hml,hnl->hmn", dK, Kr)
    dD = np.einsum("bhml,bhl->hm", gt, st[:, :, 0, :])
    ds = causal_correlate(K[None], gt).sum(axis=2) + np.einsum("hm,bhml->bhl", layer.D, gt)
    return np.transpose(ds, (0, 2, 1)), dC, dD


def structured_grads(S: StructuredStateMatrix, dA):
    """Map a dense gradient ``dA`` onto the ``P, D, Q, T`` factors of ``S``."""
    n = S.n
    Tinv = tridiag_solve(S.T, np.eye(n))
    M = np.diag(S.D) + Tinv
    dP = np.sum(dA * M * S.Q[None, :], axis=1)
    dQ = np.sum(dA * S.P[:, None] * M, axis=0)
    dD = np.diag(dA) * S.P * S.Q
    G = S.P[:, None] * dA * S.Q[None, :]
    dT = -Tinv.T @ G @ Tinv.T
    return {
        "A.P": dP, "A.D": dD, "A.Q": dQ,
        "A.T.sub": np.diag(dT, -1).copy(), "A.T.main": np.diag(dT).copy(),
        "A.T.sup": np.diag(dT, 1).copy(),
    }


def recurrent_param_grads(layer: LsslLayer, u, dy_seq):
    """Timestep and state-matrix gradients through the bilinear recurrence.

    Parameters
    ----------
    layer : LsslLayer
    u : ndarray, shape (batch, L, H) or (L, H)
        SSM inputs.
    dy_seq : ndarray, shape (batch, L, H, M) or (L, H, M)
        Gradient of the loss w.r.t. the SSM outputs.

    Returns
    -------
    d_dt : ndarray, shape (H,)
    dA : ndarray, shape (N, N)
    """
    u = np.asarray(u, dtype=np.float64)
    dy_seq = np.asarray(dy_seq, dtype=np.float64)
    if u.ndim == 2:
        u, dy_seq = u[None], dy_seq[None]
    A = layer.dense_A()
    N = A.shape[0]
    batch, L, H = u.shape
    d_dt = np.zeros(H)
    dA = np.zeros((N, N))
    for h in range(H):
        dt = float(layer.dt[h])
        Bh, Ch = layer.B[h], layer.C[h]
        lu_bwd = disc.factor_backward(A, -0.5 * dt)
        xs = [np.zeros((N, batch))]
        vs = []
        for t in range(L):
            drive = dt * np.outer(Bh, u[:, t, h])
            v = disc.forward_diff(A, 0.5 * dt, xs[-1]) + drive
            vs.append(v)
            xs.append(disc.backward_diff(A, -0.5 * dt, v, lu=lu_bwd))
        g = np.zeros((N, batch))
        for t in range(L - 1, -1, -1):
            gx = g + Ch.T @ dy_seq[:, t, h, :].T
            gv, dd_b, dA_b = disc.backward_diff_grad(A, -0.5 * dt, vs[t], gx, lu=lu_bwd)
            gprev, dd_f, dA_f = disc.forward_diff_grad(A, 0.5 * dt, xs[t], gv)
            d_dt[h] += -0.5 * dd_b + 0.5 * dd_f + float(np.sum(gv * np.outer(Bh, u[:, t, h])))
            dA += dA_b + dA_f
            g = gprev
    return d_dt, dA


def model_backward(model: LsslModel, X, target, loss="cross_entropy"):
    """Loss value and gradients for every trainable parameter.

    Returns ``(loss_value, grads)`` where ``grads`` maps the names from
    ``model.parameters(trainable_only=True)`` to arrays of the same shape.
    """
    caches = []
    pred = model_forward(model, X, "conv", caches)
    value, dpred = loss_and_grad(pred, target, loss)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss")
    top = caches.pop()
    z, X = top["z"], top["X"]
    grads = {}

    pooled_shape = pred.shape
    dpooled = dpred @ model.dec_weight
    if model.pooling == "none":
        grads["decoder.weight"] = np.einsum("blc,blh->ch", dpred.reshape(pooled_shape), z)
        grads["decoder.bias"] = dpred.sum(axis=(0, 1))
        dz = dpooled
    else:
        pooled = z.mean(axis=1) if model.pooling == "mean" else z[:, -1]
        grads["decoder.weight"] = dpred.T @ pooled
        grads["decoder.bias"] = dpred.sum(axis=0)
        dz = np.zeros_like(z)
        if model.pooling == "mean":
            dz += dpooled[:, None, :] / z.shape[1]
        else:
            dz[:, -1] = dpooled

    for i in range(len(model.layers) - 1, -1, -1):
        layer, c = model.layers[i], caches[i]
        prefix = f"layers.{i}."
        if layer.norm == "post":
            xhat, rstd = c["ln"]
            dres, dgain, dbias = _layer_norm_backward(dz, xhat, rstd, layer.norm_gain)
            du, df = dres, dres
        else:
            du, df = dz, dz
        grads[prefix + "ff_weight"] = np.einsum("blh,blk->hk", df, c["g"])
        grads[prefix + "ff_bias"] = df.sum(axis=(0, 1))
        dg = (df @ layer.ff_weight).reshape(c["v"].shape)
        dv = dg * gelu_grad(c["v"])
        ds, dC, dD = _ssm_backward(layer, c["s"], dv)
        grads[prefix + "C"] = dC
        grads[prefix + "D"] = dD
        if layer.mode == "full":
            d_dt, dA = recurrent_param_grads(layer, c["s"], dv)
            grads[prefix + "log_dt"] = d_dt * layer.dt
            if isinstance(layer.A, StructuredStateMatrix):
                for k, v in structured_grads(layer.A, dA).items():
                    grads[prefix + k] = v
            else:
                grads[prefix + "A"] = dA
        if layer.norm == "pre":
            xhat, rstd = c["ln"]
            dpre, dgain, dbias = _layer_norm_backward(ds, xhat, rstd, layer.norm_gain)
            du = du + dpre
        else:
            du = du + ds
        grads[prefix + "norm_gain"] = dgain
        grads[prefix + "norm_bias"] = dbias
        dz = du

    grads["encoder.weight"] = np.einsum("blh,bld->hd", dz, X)
    grads["encoder.bias"] = dz.sum(axis=(0, 1))
    order = model.parameters(trainable_only=True)
    return value, {k: grads[k] for k in order}


# -- optimizer --------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """One Adam update with bias correction.

    Pure: returns ``(new_params, new_state)`` and leaves the inputs untouched.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    step = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m.get(k, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(step, m_new, v_new)


# -- finite differences ------------------------------------------------------------


def finite_difference(f, theta, index, rel_step=1e-5):
    """Central difference of scalar ``f()`` w.r.t. ``theta[index]`` (in place, restored)."""
    orig = theta[index]
    h = rel_step * max(1.0, abs(orig))
    theta[index] = orig + h
    fp = f()
    theta[index] = orig - h
    fm = f()
    theta[index] = orig
    return (fp - fm) / (2.0 * h)


def relative_error(a, b, floor=1e-6):
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps near-zero entries meaningful."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
