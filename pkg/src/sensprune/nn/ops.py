"""Forward/backward kernels on channel-major (C, N, H, W) arrays.

Channel-major keeps every im2col/col2im copy in long contiguous runs, which
is where a numpy convolution spends most of its time. Every ``*_forward``
returns ``(out, cache)``; the matching ``*_backward`` takes the upstream
gradient and that cache. Arithmetic stays in the dtype of the inputs, so
float64 arrays give float64 gradients for checking.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5


def _windows(xp, k, s):
    # (C, N, Ho, Wo, k, k) view
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def _pad(x, pad, value=0.0):
    if not pad:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _im2col(xp, k, stride, ho, wo):
    c, n = xp.shape[:2]
    if k == 1 and stride == 1:
        return xp.reshape(c, -1)
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo)


def conv2d_forward(x, w, b, stride=1, pad=0):
    c, n, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    cols = _im2col(_pad(x, pad), k, stride, ho, wo)
    out = w.reshape(o, -1) @ cols
    if b is not None:
        out += b[:, None]
    return out.reshape(o, n, ho, wo), (cols, x.shape, w, stride, pad, b is not None)


def conv2d_backward(dout, cache):
    cols, xshape, w, stride, pad, has_bias = cache
    c, n, h, wd = xshape
    o, _, k, _ = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    d2 = dout.reshape(o, -1)
    dw = (cols @ d2.T).T.reshape(w.shape)
    db = d2.sum(axis=1) if has_bias else None
    if stride == 1:
        # scatter on the flattened padded grid: each shift is one long
        # contiguous run per channel instead of many short rows
        hp, wp = h + 2 * pad, wd + 2 * pad
        size = n * hp * wp
        dpad = np.zeros((o, n, hp, wp), dtype=dout.dtype)
        dpad[:, :, :ho, :wo] = dout
        dcols = (w.reshape(o, -1).T @ dpad.reshape(o, size)).reshape(c, k, k, size)
        dxp = np.zeros((c, size), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                dxp[:, off:] += dcols[:, i, j, :size - off]
        dx = dxp.reshape(c, n, hp, wp)[:, :, pad:pad + h, pad:pad + wd]
        return np.ascontiguousarray(dx), dw, db
    dcols = (w.reshape(o, -1).T @ d2).reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, db


def _col(v):
    return v[:, None, None, None]


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.1, update=True):
    """Per-channel batch norm. In train mode the running buffers are updated
    in place unless ``update`` is false."""
    if not train:
        scale = gamma / np.sqrt(running_var + BN_EPS)
        return x * _col(scale) + _col(beta - running_mean * scale), None
    axes = (1, 2, 3)
    m = x.shape[1] * x.shape[2] * x.shape[3]
    mu = x.mean(axis=axes)
    xc = x - _col(mu)
    var = np.mean(xc * xc, axis=axes)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * _col(inv)
    out = xhat * _col(gamma) + _col(beta)
    if update:
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    return out, (xhat, inv, gamma)


def batchnorm_backward(dout, cache):
    xhat, inv, gamma = cache
    axes = (1, 2, 3)
    m = dout.shape[1] * dout.shape[2] * dout.shape[3]
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    # dx = gamma*inv/m * (m*dout - sum(dout) - xhat*sum(dout*xhat))
    dx = dout - _col(dbeta / m) - xhat * _col(dgamma / m)
    dx *= _col(gamma * inv)
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool_forward(x, size=2, stride=2, pad=0):
    """Max pool over the last two axes. Gradient goes to the first maximum of
    each window in row-major order."""
    n, c, h, w = x.shape
    if pad == 0 and size == stride and h % size == 0 and w % size == 0:
        taps = np.stack([x[:, :, i::size, j::size] for i in range(size) for j in range(size)])
        out = taps.max(axis=0)
        return out, ("fast", taps, out, x.shape, size)
    xp = _pad(x, pad, -np.inf)
    win = _windows(xp, size, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, ("general", arg, x.shape, size, stride, pad)


def maxpool_backward(dout, cache):
    if cache[0] == "fast":
        _, taps, out, xshape, size = cache
        dx = np.zeros(xshape, dtype=dout.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        q = 0
        for i in range(size):
            for j in range(size):
                hit = (taps[q] == out) & ~taken
                taken |= hit
                dx[:, :, i::size, j::size] = dout * hit
                q += 1
        return dx
    _, arg, xshape, size, stride, pad = cache
    n, c, h, w = xshape
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    for i in range(size):
        for j in range(size):
            sel = arg == i * size + j
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dout * sel
    return dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp


def avgpool_forward(x):
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def avgpool_backward(dout, xshape):
    h, w = xshape[2], xshape[3]
    return np.broadcast_to(dout / (h * w), xshape).copy()


def dense_forward(x, w, b):
    """Flatten per sample in (channel, y, x) order, then affine."""
    n = x.shape[1]
    flat = x.transpose(1, 0, 2, 3).reshape(n, -1)
    out = flat @ w.T + b
    return np.ascontiguousarray(out.T)[:, :, None, None], (flat, x.shape, w)


def dense_backward(dout, cache):
    flat, xshape, w = cache
    c, n, h, wd = xshape
    d2 = dout.reshape(dout.shape[0], n).T
    dw = d2.T @ flat
    db = d2.sum(axis=0)
    dx = (d2 @ w).reshape(n, c, h, wd).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dw, db


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. sample-major ``logits``
    (N, K[, 1, 1]).

    The loss is accumulated in float64.
    """
    z = logits.reshape(logits.shape[0], -1)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -float(np.sum(logp[np.arange(n), labels], dtype=np.float64)) / n
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad.reshape(logits.shape).astype(logits.dtype, copy=False)
