"""Differentiable operations used by the duration predictor and mel generator.

Activations are laid out channel-first, ``[B, C, T]``.  Ops that are
documented for a single sequence (``[C, T]``) accept the unbatched form and
return it unbatched.
"""

from dataclasses import dataclass

import numpy as np

from talknet.errors import DegenerateBatchError, InvalidArgumentError, OutOfVocabularyError
from talknet.numeric.tensor import Tensor, get_dtype, result


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _batched(x):
    """Return (x as [B, C, T] Tensor, unbatch flag)."""
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise InvalidArgumentError(f"expected [C, T] or [B, C, T] input, got shape {x.shape}")
    return x, False


def reshape(x, shape):
    old = x.shape
    return result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return result(a.data + b.data, (a, b), lambda g: (g, g))


def mask_time(x, mask):
    """Zero the padded frames of ``x`` ([B, C, T]) using a [B, T] validity mask."""
    if mask is None:
        return x
    m = np.asarray(mask, dtype=x.data.dtype)[:, None, :]
    return result(x.data * m, (x,), lambda g: (g * m,))


def weighted_sum(x, weights):
    """Scalar sum(x * weights) with constant weights."""
    w = np.asarray(weights, dtype=x.data.dtype)
    return result(np.asarray((x.data * w).sum()), (x,), lambda g: (g * w,))


def relu(x):
    keep = x.data > 0
    return result(np.maximum(x.data, 0), (x,), lambda g: (g * keep,))


def dropout(x, p, rng=None, training=True):
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval is identity."""
    if not 0 <= p < 1:
        raise InvalidArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    keep = rng.random(x.shape) >= p
    scale = (keep / (1.0 - p)).astype(x.data.dtype)
    return result(x.data * scale, (x,), lambda g: (g * scale,))


def embedding(ids, table):
    """Gather rows of ``table`` ([V, D]).  ``ids`` [T] -> [D, T]; ``ids`` [B, T] -> [B, D, T]."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise OutOfVocabularyError(f"token id out of range for vocabulary of size {vocab}")
    out = np.moveaxis(table.data[ids], -1, -2)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, np.moveaxis(g, -2, -1))
        return (gt,)

    return result(np.ascontiguousarray(out), (table,), backward)


def interp_embedding(table, left, right, w_left, w_right):
    """Per-frame convex mix of two embedding rows.

    ``out[..., :, t] = w_left[t] * table[left[t]] + w_right[t] * table[right[t]]``;
    index/weight arrays are [L] or [B, L].  Gradient scatters to both rows.
    """
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    dt = table.data.dtype
    wl = np.asarray(w_left, dtype=dt)[..., None]
    wr = np.asarray(w_right, dtype=dt)[..., None]
    vocab = table.shape[0]
    for idx in (left, right):
        if idx.size and (idx.min() < 0 or idx.max() >= vocab):
            raise OutOfVocabularyError(f"token id out of range for vocabulary of size {vocab}")
    mixed = wl * table.data[left] + wr * table.data[right]
    out = np.ascontiguousarray(np.moveaxis(mixed, -1, -2))

    def backward(g):
        gm = np.moveaxis(g, -2, -1)
        gt = np.zeros_like(table.data)
        np.add.at(gt, left, gm * wl)
        np.add.at(gt, right, gm * wr)
        return (gt,)

    return result(out, (table,), backward)


def conv1d(x, weight, bias=None, groups=1, kernel=None):
    """Same-padded 1D cross-correlation.

    ``weight`` is [C_out, C_in / groups, k] with odd k; padding is (k - 1) / 2
    zeros on both sides so the time length is preserved.  Depthwise
    (groups == C_in == C_out) and pointwise (k == 1, groups == 1) convolutions
    take dedicated fast paths.
    """
    x, unbatch = _batched(x)
    c_out, c_in_g, k = weight.shape
    c_in = x.shape[1]
    if kernel is not None and kernel != k:
        raise InvalidArgumentError(f"kernel: expected {kernel}, weight has kernel dimension {k}")
    if k % 2 == 0:
        raise InvalidArgumentError(f"kernel: must be odd, got {k}")
    if groups < 1 or c_in % groups or c_out % groups:
        raise InvalidArgumentError(f"groups: {groups} does not divide C_in={c_in} and C_out={c_out}")
    if c_in_g != c_in // groups:
        raise InvalidArgumentError(
            f"C_in: input has {c_in} channels, weight expects {c_in_g * groups} (groups={groups})"
        )
    if bias is not None and bias.shape != (c_out,):
        raise InvalidArgumentError(f"C_out: bias shape {bias.shape} does not match {c_out} output channels")

    if k == 1 and groups == 1:
        out = _pointwise(x, weight)
    elif groups == c_in and c_out == c_in:
        out = _depthwise(x, weight)
    else:
        out = _grouped(x, weight, groups)
    if bias is not None:
        out = _add_channel_bias(out, bias)
    if unbatch:
        out = reshape(out, out.shape[1:])
    return out


def _pointwise(x, weight):
    w = weight.data[:, :, 0]
    xd = x.data
    b, c, t_len = xd.shape
    # fold the batch into the time axis so each product is one large GEMM
    flat = xd[0] if b == 1 else xd.transpose(1, 0, 2).reshape(c, b * t_len)

    def unfold(y, rows):
        return y[None] if b == 1 else y.reshape(rows, b, t_len).transpose(1, 0, 2)

    def backward(g):
        gflat = g[0] if b == 1 else g.transpose(1, 0, 2).reshape(-1, b * t_len)
        gx = unfold(w.T @ gflat, c)
        gw = gflat @ flat.T
        return np.ascontiguousarray(gx), gw[:, :, None]

    return result(np.ascontiguousarray(unfold(w @ flat, w.shape[0])), (x, weight), backward)


def _depthwise_apply(xd, w):
    k = w.shape[1]
    pad = (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    return np.einsum("bctj,cj->bct", win, w), win


def _depthwise(x, weight):
    w = weight.data[:, 0, :]
    out, win = _depthwise_apply(x.data, w)

    def backward(g):
        gw = np.einsum("bctj,bct->cj", win, g)
        # correlation with the time-reversed kernel is the transpose
        gx, _ = _depthwise_apply(g, np.ascontiguousarray(w[:, ::-1]))
        return gx, gw[:, None, :]

    return result(out, (x, weight), backward)


def _grouped(x, weight, groups):
    c_out, c_in_g, k = weight.shape
    pad = (k - 1) // 2
    b, c_in, t_len = x.shape
    o_g = c_out // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    # windows[b, c, t, j] = xp[b, c, t + j]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    out = np.empty((b, c_out, t_len), dtype=x.data.dtype)
    for gi in range(groups):
        wg = weight.data[gi * o_g:(gi + 1) * o_g]
        wing = win[:, gi * c_in_g:(gi + 1) * c_in_g]
        out[:, gi * o_g:(gi + 1) * o_g] = np.einsum("ocj,bctj->bot", wg, wing, optimize=True)

    def backward(g):
        gw = np.empty_like(weight.data)
        gxp = np.zeros_like(xp)
        for gi in range(groups):
            osl = slice(gi * o_g, (gi + 1) * o_g)
            csl = slice(gi * c_in_g, (gi + 1) * c_in_g)
            gg = g[:, osl]
            gw[osl] = np.einsum("bot,bctj->ocj", gg, win[:, csl], optimize=True)
            gwin = np.einsum("ocj,bot->bctj", weight.data[osl], gg, optimize=True)
            for j in range(k):
                gxp[:, csl, j:j + t_len] += gwin[..., j]
        return gxp[:, :, pad:pad + t_len], gw

    return result(out, (x, weight), backward)


def _add_channel_bias(x, bias):
    return result(
        x.data + bias.data[None, :, None],
        (x, bias),
        lambda g: (g, g.sum(axis=(0, 2))),
    )


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels, momentum=0.1, eps=1e-5):
        dt = get_dtype()
        return cls(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt), momentum, eps)


def batch_norm1d(x, gamma, beta, state, training=True, mask=None):
    """Batch normalization over batch and time axes.

    With a [B, T] ``mask``, statistics use valid frames only and padded
    outputs are zeroed.  Training mode updates ``state`` in place (running
    variance uses the unbiased estimate).
    """
    x, unbatch = _batched(x)
    xd = x.data
    dt = xd.dtype
    m = np.ones((xd.shape[0], 1, xd.shape[2]), dtype=dt) if mask is None else (
        np.asarray(mask, dtype=dt)[:, None, :]
    )
    n = float(m.sum())
    g_ = gamma.data[None, :, None]
    b_ = beta.data[None, :, None]

    if training:
        if n < 2:
            raise InvalidArgumentError("batch_norm1d: training mode needs at least 2 valid frames")
        mean = np.einsum("bct,bxt->c", xd, m) / n
        centered = xd - mean[None, :, None]
        centered *= m
        var = np.einsum("bct,bct->c", centered, centered) / n
        inv_std = (1.0 / np.sqrt(var + state.eps)).astype(dt)
        xhat = centered
        xhat *= inv_std[None, :, None]
        mom = state.momentum
        state.running_mean[:] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[:] = (1 - mom) * state.running_var + mom * var * (n / (n - 1))

        def backward(gout):
            gm = gout * m
            ggamma = np.einsum("bct,bct->c", gm, xhat)
            gbeta = gm.sum(axis=(0, 2))
            gx = gm - (gbeta / n)[None, :, None]
            gx -= xhat * (ggamma / n)[None, :, None]
            gx *= (inv_std * gamma.data)[None, :, None]
            gx *= m
            return gx, ggamma, gbeta
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + state.eps)).astype(dt)
        xhat = (xd - state.running_mean[None, :, None]) * inv_std[None, :, None]

        def backward(gout):
            gm = gout * m
            gx = gm * g_ * inv_std[None, :, None]
            return gx, np.einsum("bct,bct->c", gm, xhat), gm.sum(axis=(0, 2))

    out = xhat * g_
    out += b_
    out *= m
    y = result(out.astype(dt, copy=False), (x, gamma, beta), backward)
    if unbatch:
        y = reshape(y, y.shape[1:])
    return y


def _valid_mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask)
    if m.ndim == len(shape) - 1 and len(shape) == 3:
        m = m[:, None, :]
    return np.broadcast_to(m.astype(bool), shape)


def mse_loss(pred, target, mask=None):
    """Mean squared error over valid (unmasked) positions and all channels."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise InvalidArgumentError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    valid = _valid_mask(mask, pred.shape)
    n = int(valid.sum())
    if n == 0:
        raise DegenerateBatchError("mse_loss: every position is masked")
    vm = valid.astype(pred.data.dtype)
    diff = (pred.data - target) * vm
    loss = np.asarray((diff ** 2).sum() / n, dtype=pred.data.dtype)
    return result(loss, (pred,), lambda g: (g * 2.0 * diff / n,))


def log_softmax(logits, axis):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def xe_loss(logits, targets, mask=None):
    """Cross entropy of class logits [K, T] or [B, K, T] against int targets [T] / [B, T]."""
    squeeze = logits.ndim == 2
    ld = logits.data[None] if squeeze else logits.data
    tg = np.asarray(targets, dtype=np.int64)
    tg = tg[None] if squeeze else tg
    b, k, t_len = ld.shape
    if tg.shape != (b, t_len):
        raise InvalidArgumentError(f"xe_loss: targets {tg.shape} do not match logits {ld.shape}")
    valid = np.ones((b, t_len), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(b, t_len)
    n = int(valid.sum())
    if n == 0:
        raise DegenerateBatchError("xe_loss: every position is masked")
    if tg[valid].size and (tg[valid].min() < 0 or tg[valid].max() >= k):
        raise InvalidArgumentError(f"xe_loss: target class outside [0, {k})")
    safe = np.where(valid, tg, 0)
    logp = log_softmax(ld, axis=1)
    picked = np.take_along_axis(logp, safe[:, None, :], axis=1)[:, 0, :]
    loss = np.asarray(-(picked * valid).sum() / n, dtype=ld.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None, :], np.take_along_axis(grad, safe[:, None, :], axis=1) - 1, axis=1)
        grad = grad * valid[:, None, :] * (g / n)
        return (grad[0] if squeeze else grad,)

    return result(loss, (logits,), backward)
