"""Differentiable layer primitives on NCHW tensors.

Convolutions are lowered to a single matrix product over a channel-major
column buffer; gathering and scattering loop over kernel offsets only
(kh*kw iterations), never over pixels.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import DTYPE, Tensor, as_tensor

BCE_EPS = 1e-12


def _im2col(xt, kh, kw, stride, ho, wo):
    """(C, N, Hp, Wp) -> (kh*kw*C, N*Ho*Wo), rows ordered (i, j, c)."""
    c, n = xt.shape[:2]
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xt[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(kh * kw * c, n * ho * wo)


def _col2im(cols, out_shape, kh, kw, stride, ho, wo):
    """Adjoint of :func:`_im2col`: add columns back into a (C, N, Hp, Wp) array."""
    out = np.zeros(out_shape, dtype=DTYPE)
    cols = cols.reshape(kh, kw, out_shape[0], out_shape[1], ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[i, j]
    return out


def conv_output_size(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if span < 0:
        raise DimensionError(f"kernel {kernel} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ConfigError(
            f"input {size} with kernel {kernel}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation.

    ``x`` is N x C x H x W, ``weight`` is K x C x kh x kw, ``bias`` has K entries.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"input has {c} channels, weight expects {cw}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xt = x.data.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xt, kh, kw, stride, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(k, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(k, -1)
        if weight.requires_grad:
            weight._accum((gm @ cols.T).reshape(k, kh, kw, c).transpose(0, 3, 1, 2))
        if bias is not None and bias.requires_grad:
            bias._accum(gm.sum(axis=1))
        if x.requires_grad:
            dxt = _col2im(wmat.T @ gm, xt.shape, kh, kw, stride, ho, wo)
            x._accum(dxt[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3))

    return Tensor._make(out, parents, backward)


def conv2d_transpose(x, weight, bias=None, stride=1, padding=0):
    """Transposed convolution (the input-gradient of :func:`conv2d`).

    ``weight`` is C_in x C_out x kh x kw; the output side is
    ``(H - 1) * stride - 2 * padding + kh``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d_transpose expects 4-D input and weight")
    n, c, h, w = x.shape
    cw, k, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"input has {c} channels, weight expects {cw}")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise DimensionError("padding leaves an empty output")
    xm = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * k, c)
    full = _col2im(wmat @ xm, (k, n, hf, wf), kh, kw, stride, h, w)
    out = full[:, :, padding:padding + ho, padding:padding + wo].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3)))
        gt = g.transpose(1, 0, 2, 3)
        if padding:
            gt = np.pad(gt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        gcols = _im2col(gt, kh, kw, stride, h, w)
        if weight.requires_grad:
            weight._accum((gcols @ xm.T).reshape(kh, kw, k, c).transpose(3, 2, 0, 1))
        if x.requires_grad:
            x._accum((wmat.T @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3))

    return Tensor._make(out, parents, backward)


def maxpool2x2(x, return_indices=False):
    """Non-overlapping 2x2 max pooling with stride 2.

    Odd spatial sizes are replication-padded by one row/column first. Ties
    resolve to the first element of the window in row-major order.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    xd = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") if (ph or pw) else x.data
    hh, ww = xd.shape[2] // 2, xd.shape[3] // 2
    blocks = xd.reshape(n, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, hh, ww, 4), dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(xd.shape)
        if ph:
            gx[:, :, h - 1, :] += gx[:, :, h, :]
        if pw:
            gx[:, :, :, w - 1] += gx[:, :, :, w]
        x._accum(gx[:, :, :h, :w])

    out_t = Tensor._make(out, (x,), backward)
    return (out_t, idx) if return_indices else out_t


def upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return Tensor._make(
        out, (x,), lambda g: x._accum(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    )


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t._accum(piece)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: x._accum(g * mask))


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor._make(x.data * scale, (x,), lambda g: x._accum(g * scale))


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return Tensor._make(out, (x,), lambda g: x._accum(g * out * (1.0 - out)))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: x._accum(g * (1.0 - out * out)))


def softmax(x, axis=1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return Tensor._make(s, (x,), backward)


def activation(x, kind, slope=0.2):
    """Dispatch an elementwise activation by name."""
    funcs = {
        "relu": relu,
        "leaky-relu": lambda t: leaky_relu(t, slope),
        "sigmoid": sigmoid,
        "tanh": tanh,
        "softmax": softmax,
    }
    if kind not in funcs:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(funcs)}")
    return funcs[kind](x)


def dropout(x, rate, seed, training=True):
    """Inverted dropout; the mask depends only on ``seed`` and the shape."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return Tensor._make(x.data * scale, (x,), lambda g: x._accum(g * scale))


def batchnorm2d(x, gamma, beta, running_mean, running_var, training=True, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over N, H, W.

    ``running_mean`` / ``running_var`` are ndarrays updated in place when
    ``training`` is true.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    m = n * h * w
    if training:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * (m / max(m - 1, 1))
    else:
        mu = running_mean.reshape(1, c, 1, 1)
        var = running_var.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gamma.data.reshape(1, c, 1, 1)
    out = gd * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gd
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                x._accum(inv / m * (m * dxhat - s1 - xhat * s2))
            else:
                x._accum(dxhat * inv)

    return Tensor._make(out, (x, gamma, beta), backward)


def global_avg_pool(x):
    """N x C x H x W -> N x C."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    return Tensor._make(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: x._accum(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape)),
    )


def flatten(x):
    x = as_tensor(x)
    return x.reshape(x.shape[0], -1)


def dense(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    out = as_tensor(x) @ weight
    return out + bias if bias is not None else out


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy of row-wise softmax against (one-hot) targets."""
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    if t.shape != logits.shape:
        raise DimensionError(f"targets {t.shape} do not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -(t * logsm).sum() / n
    sm = np.exp(logsm)

    def backward(g):
        logits._accum(g * (sm * t.sum(axis=1, keepdims=True) - t) / n)

    return Tensor._make(np.array(loss), (logits,), backward)


def binary_cross_entropy(probs, targets):
    """Mean binary cross-entropy; probabilities are clamped to [eps, 1 - eps]."""
    probs = as_tensor(probs)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=DTYPE)
    if t.shape != probs.shape:
        raise DimensionError(f"targets {t.shape} do not match probabilities {probs.shape}")
    p = np.clip(probs.data, BCE_EPS, 1.0 - BCE_EPS)
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / n
    inside = (probs.data >= BCE_EPS) & (probs.data <= 1.0 - BCE_EPS)

    def backward(g):
        probs._accum(g * inside * ((1.0 - t) / (1.0 - p) - t / p) / n)

    return Tensor._make(np.array(loss), (probs,), backward)
