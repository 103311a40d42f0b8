"""Differentiable operations over Tensors.

Covers exactly the layer set the waveform models need: 1D convolution,
max pooling, batch normalization, leaky ReLU, sigmoid, dense, dropout,
GRU / BiGRU recurrences, global average pooling, binary cross-entropy,
plus the shape plumbing (flatten, transpose, concat, crop, slicing) that
wires them together.

Conventions: feature maps are [batch, channels, length]; sequences are
[batch, time, features]. Every op records a backward rule on its output.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.3
BCE_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.99


# ---------------------------------------------------------------------------
# convolution / pooling


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation plus bias over [batch, c_in, L].

    `same` zero-pads symmetrically so L_out = ceil(L / stride); `valid` gives
    L_out = floor((L - kernel) / stride) + 1.
    """
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    bsz, c_in, length = x.shape
    c_out, c_in_w, kernel = w.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape} vs weight {w.shape}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv1d bias shape {b.shape}, expected ({c_out},)")

    if padding == "same":
        l_out = -(-length // stride)
        total = max((l_out - 1) * stride + kernel - length, 0)
        pad_l = total // 2
        pad_r = total - pad_l
    elif padding == "valid":
        l_out = (length - kernel) // stride + 1
        if l_out < 1:
            raise ShapeError(f"conv1d valid: kernel {kernel} exceeds length {length}")
        pad_l = pad_r = 0
    else:
        raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_l, pad_r))) if (pad_l or pad_r) else x.data
    span = (l_out - 1) * stride + 1
    out = np.broadcast_to(b.data[None, :, None], (bsz, c_out, l_out)).copy()
    for j in range(kernel):
        seg = xp[:, :, j : j + span : stride]
        out += np.matmul(w.data[:, :, j], seg)

    def backward(g):
        b.accumulate_grad(g.sum(axis=(0, 2)))
        dw = np.empty_like(w.data)
        dxp = np.zeros_like(xp)
        for j in range(kernel):
            seg = xp[:, :, j : j + span : stride]
            dw[:, :, j] = np.tensordot(g, seg, axes=([0, 2], [0, 2]))
            dxp[:, :, j : j + span : stride] += np.matmul(w.data[:, :, j].T, g)
        w.accumulate_grad(dw)
        x.accumulate_grad(dxp[:, :, pad_l : pad_l + length] if (pad_l or pad_r) else dxp)

    return Tensor(out, parents=(x, w, b), backward=backward)


def maxpool1d(x: Tensor, pool: int) -> Tensor:
    """Non-overlapping max pooling; the trailing remainder is discarded.

    Gradient routes to the argmax of each window, ties to the lowest index.
    pool > L yields an empty (length 0) output rather than an error.
    """
    if pool < 1:
        raise ContractError(f"pool must be >= 1, got {pool}")
    bsz, ch, length = x.shape
    l_out = length // pool
    windows = x.data[:, :, : l_out * pool].reshape(bsz, ch, l_out, pool)
    out = windows.max(axis=-1)
    idx = windows.argmax(axis=-1)

    def backward(g):
        dx = np.zeros_like(x.data)
        dwin = dx[:, :, : l_out * pool].reshape(bsz, ch, l_out, pool)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        x.accumulate_grad(dx)

    return Tensor(out, parents=(x,), backward=backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over the time axis: [b, c, L] -> [b, c]."""
    bsz, ch, length = x.shape
    if length < 1:
        raise ShapeError("global_avg_pool requires length >= 1")
    out = x.data.mean(axis=2)

    def backward(g):
        x.accumulate_grad(np.broadcast_to(g[:, :, None] / length, x.shape))

    return Tensor(out, parents=(x,), backward=backward)


# ---------------------------------------------------------------------------
# normalization


class BatchNormState:
    """Running statistics of one batch-norm layer (non-trainable)."""

    __slots__ = ("running_mean", "running_var", "seen_train", "_warned")

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.seen_train = False
        self._warned = False


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over (batch x length), then scale/shift.

    Train mode normalizes with batch statistics and updates the running
    mean/variance; infer mode uses the running statistics.
    """
    bsz, ch, length = x.shape
    if mode == "train":
        n = bsz * length
        if n < 2:
            raise ContractError("batchnorm1d train mode needs batch*length >= 2")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        state.running_mean *= momentum
        state.running_mean += (1.0 - momentum) * mean.astype(state.running_mean.dtype)
        state.running_var *= momentum
        state.running_var += (1.0 - momentum) * var.astype(state.running_var.dtype)
        state.seen_train = True
    elif mode == "infer":
        if not state.seen_train and not state._warned:
            log.warning("batchnorm1d inference before any train step; using initialized running stats")
            state._warned = True
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    else:
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        gamma.accumulate_grad((g * xhat).sum(axis=(0, 2)))
        beta.accumulate_grad(g.sum(axis=(0, 2)))
        dxhat = g * gamma.data[None, :, None]
        if mode == "train":
            n = bsz * length
            s1 = dxhat.sum(axis=(0, 2))[None, :, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
            dx = (inv_std[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std[None, :, None]
        x.accumulate_grad(dx)

    return Tensor(out, parents=(x, gamma, beta), backward=backward)


# ---------------------------------------------------------------------------
# activations


def leaky_relu(x: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, alpha * x.data)

    def backward(g):
        x.accumulate_grad(np.where(mask, g, alpha * g))

    return Tensor(out, parents=(x,), backward=backward)


def _sigmoid_raw(z: np.ndarray) -> np.ndarray:
    # Branch form avoids exp overflow; the input clamp keeps exp(z) away from
    # underflow so the output stays strictly positive and finite.
    lim = 700.0 if z.dtype == np.float64 else 85.0
    zc = np.clip(z, -lim, lim)
    out = np.empty_like(zc)
    pos = zc >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-zc[pos]))
    ez = np.exp(zc[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_raw(x.data)

    def backward(g):
        x.accumulate_grad(g * out * (1.0 - out))

    return Tensor(out, parents=(x,), backward=backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        x.accumulate_grad(g * (1.0 - out * out))

    return Tensor(out, parents=(x,), backward=backward)


# ---------------------------------------------------------------------------
# dense / dropout


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map [b, n] @ [n, m] + [m]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense shape mismatch: x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias shape {b.shape}, expected ({w.shape[1]},)")
    out = x.data @ w.data + b.data

    def backward(g):
        x.accumulate_grad(g @ w.data.T)
        w.accumulate_grad(x.data.T @ g)
        b.accumulate_grad(g.sum(axis=0))

    return Tensor(out, parents=(x, w, b), backward=backward)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train zeroes with probability `rate` and rescales
    survivors by 1/(1-rate); infer is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        out = x.data

        def backward(g):
            x.accumulate_grad(g)

        return Tensor(out, parents=(x,), backward=backward)
    if rng is None:
        raise ContractError("dropout in train mode requires an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    out = x.data * keep * scale

    def backward(g):
        x.accumulate_grad(g * keep * scale)

    return Tensor(out, parents=(x,), backward=backward)


# ---------------------------------------------------------------------------
# recurrence


def gru_layer(x: Tensor, w: Tensor, u: Tensor, bw: Tensor, bu: Tensor, direction: str = "fwd") -> Tensor:
    """GRU over [b, T, n] in the double-bias (reset-after) formulation.

    Gate order inside the fused kernels is (update z, reset r, candidate h):
    w [n, 3h], u [h, 3h], bw/bu [3h]. The bwd direction processes the
    reversed sequence and re-reverses its output, so index 0 of a bwd output
    holds the direction's final state.
    """
    if direction not in ("fwd", "bwd"):
        raise ContractError(f"direction must be 'fwd' or 'bwd', got {direction!r}")
    bsz, steps, n_in = x.shape
    if steps < 1:
        raise ContractError("gru_layer requires T >= 1")
    hid = u.shape[0]
    if w.shape != (n_in, 3 * hid) or u.shape != (hid, 3 * hid):
        raise ShapeError(f"gru_layer weight shapes w {w.shape}, u {u.shape} for input {x.shape}")

    xd = x.data[:, ::-1] if direction == "bwd" else x.data
    pre = xd.reshape(bsz * steps, n_in) @ w.data + bw.data
    pre = pre.reshape(bsz, steps, 3 * hid)

    zs = np.empty((bsz, steps, hid), dtype=x.dtype)
    rs = np.empty_like(zs)
    cands = np.empty_like(zs)
    recs_h = np.empty_like(zs)  # U_h h_prev + b_uh, needed by the reset gate path
    hs = np.empty_like(zs)
    h = np.zeros((bsz, hid), dtype=x.dtype)
    for t in range(steps):
        rec = h @ u.data + bu.data
        z = _sigmoid_raw(pre[:, t, :hid] + rec[:, :hid])
        r = _sigmoid_raw(pre[:, t, hid : 2 * hid] + rec[:, hid : 2 * hid])
        c = rec[:, 2 * hid :]
        cand = np.tanh(pre[:, t, 2 * hid :] + r * c)
        h = (1.0 - z) * cand + z * h
        zs[:, t] = z
        rs[:, t] = r
        cands[:, t] = cand
        recs_h[:, t] = c
        hs[:, t] = h

    out = hs[:, ::-1].copy() if direction == "bwd" else hs

    def backward(g):
        gd = g[:, ::-1] if direction == "bwd" else g
        d_pre = np.empty((bsz, steps, 3 * hid), dtype=x.dtype)
        d_rec = np.empty_like(d_pre)
        carry = np.zeros((bsz, hid), dtype=x.dtype)
        for t in range(steps - 1, -1, -1):
            dh = gd[:, t] + carry
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((bsz, hid), dtype=x.dtype)
            z, r, cand, c = zs[:, t], rs[:, t], cands[:, t], recs_h[:, t]
            dcand = dh * (1.0 - z)
            dz = dh * (h_prev - cand)
            carry = dh * z
            da_h = dcand * (1.0 - cand * cand)
            dr = da_h * c
            dc = da_h * r
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            d_pre[:, t, :hid] = da_z
            d_pre[:, t, hid : 2 * hid] = da_r
            d_pre[:, t, 2 * hid :] = da_h
            d_rec[:, t, :hid] = da_z
            d_rec[:, t, hid : 2 * hid] = da_r
            d_rec[:, t, 2 * hid :] = dc
            carry = carry + d_rec[:, t] @ u.data.T

        flat_pre = d_pre.reshape(bsz * steps, 3 * hid)
        flat_rec = d_rec.reshape(bsz * steps, 3 * hid)
        w.accumulate_grad(xd.reshape(bsz * steps, n_in).T @ flat_pre)
        bw.accumulate_grad(flat_pre.sum(axis=0))
        h_prev_all = np.concatenate([np.zeros((bsz, 1, hid), dtype=x.dtype), hs[:, :-1]], axis=1)
        u.accumulate_grad(h_prev_all.reshape(bsz * steps, hid).T @ flat_rec)
        bu.accumulate_grad(flat_rec.sum(axis=0))
        dx = (flat_pre @ w.data.T).reshape(bsz, steps, n_in)
        x.accumulate_grad(dx[:, ::-1] if direction == "bwd" else dx)

    return Tensor(out, parents=(x, w, u, bw, bu), backward=backward)


def bigru(x: Tensor, params_fwd, params_bwd) -> Tensor:
    """Concatenation of forward and backward GRU outputs along features."""
    fwd = gru_layer(x, *params_fwd, direction="fwd")
    bwd = gru_layer(x, *params_bwd, direction="bwd")
    return concat(fwd, bwd, axis=-1)


# ---------------------------------------------------------------------------
# losses


def bce_loss(p: Tensor, y: Tensor, clamp: float = BCE_CLAMP) -> Tensor:
    """Mean binary cross-entropy on probabilities, clamped to [clamp, 1-clamp].

    Gradient is zero where the clamp is active.
    """
    pc = np.clip(p.data, clamp, 1.0 - clamp)
    inside = (p.data > clamp) & (p.data < 1.0 - clamp)
    yv = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=p.dtype)
    loss = -(yv * np.log(pc) + (1.0 - yv) * np.log1p(-pc)).mean()

    def backward(g):
        dp = g * (-(yv / pc) + (1.0 - yv) / (1.0 - pc)) / pc.size
        p.accumulate_grad(np.where(inside, dp, 0.0))

    return Tensor(np.asarray(loss, dtype=p.dtype), parents=(p,), backward=backward)


def bce_with_logits(z: Tensor, y: Tensor) -> Tensor:
    """Sigmoid fused with binary cross-entropy, computed in logit space:
    mean(max(z, 0) - z*y + log1p(exp(-|z|)))."""
    yv = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=z.dtype)
    zd = z.data
    loss = (np.maximum(zd, 0.0) - zd * yv + np.log1p(np.exp(-np.abs(zd)))).mean()

    def backward(g):
        z.accumulate_grad(g * (_sigmoid_raw(zd) - yv) / zd.size)

    return Tensor(np.asarray(loss, dtype=z.dtype), parents=(z,), backward=backward)


# ---------------------------------------------------------------------------
# shape plumbing


def flatten(x: Tensor) -> Tensor:
    """[b, ...] -> [b, prod(...)]."""
    bsz = x.shape[0]
    out = x.data.reshape(bsz, -1)

    def backward(g):
        x.accumulate_grad(g.reshape(x.shape))

    return Tensor(out, parents=(x,), backward=backward)


def swap_ct(x: Tensor) -> Tensor:
    """Swap the channel and time axes: [b, c, L] <-> [b, L, c]."""
    out = np.ascontiguousarray(x.data.transpose(0, 2, 1))

    def backward(g):
        x.accumulate_grad(g.transpose(0, 2, 1))

    return Tensor(out, parents=(x,), backward=backward)


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    out = np.concatenate([a.data, b.data], axis=axis)
    split = a.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        a.accumulate_grad(ga)
        b.accumulate_grad(gb)

    return Tensor(out, parents=(a, b), backward=backward)


def crop_time(x: Tensor, length: int) -> Tensor:
    """Truncate the trailing axis to `length` samples."""
    if x.shape[-1] < length:
        raise ShapeError(f"crop_time: length {length} exceeds axis size {x.shape[-1]}")
    out = x.data[..., :length]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[..., :length] = g
        x.accumulate_grad(dx)

    return Tensor(out.copy(), parents=(x,), backward=backward)


def timestep(x: Tensor, t: int) -> Tensor:
    """Select one step of a [b, T, f] sequence -> [b, f]."""
    out = x.data[:, t, :].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, t, :] = g
        x.accumulate_grad(dx)

    return Tensor(out, parents=(x,), backward=backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g):
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    return Tensor(out, parents=(a, b), backward=backward)


def scale(x: Tensor, s: float) -> Tensor:
    sv = np.asarray(s, dtype=x.dtype)
    out = x.data * sv

    def backward(g):
        x.accumulate_grad(g * sv)

    return Tensor(out, parents=(x,), backward=backward)
