"""Differentiable operators on :class:`~oseg.tensor.Tensor`.

Only the operators the segmentation and translation networks need. Shapes
must match exactly; there is no broadcasting beyond Python scalars.
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}",
                         expected=a.shape, got=b.shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor.from_op(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return Tensor.from_op(out, (x,), lambda g: (g * (out > 0),), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return Tensor.from_op(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return Tensor.from_op(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor.from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor.from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean of an empty tensor", got=x.shape)
    n = x.size
    shape = x.shape
    return Tensor.from_op(np.asarray(x.data.mean()), (x,),
                          lambda g: (np.full(shape, float(g) / n),), "mean")


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor.from_op(np.asarray(x.data.sum()), (x,),
                          lambda g: (np.full(shape, float(g)),), "sum")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    area = h * w

    def _bw(g):
        return (np.broadcast_to(g / area, x.shape).copy(),)

    return Tensor.from_op(x.data.mean(axis=(2, 3), keepdims=True), (x,), _bw, "gap")


# ---------------------------------------------------------------------------
# convolution


def _padded_cnhw(xd: np.ndarray, padding: int) -> np.ndarray:
    """(C, N, Hp, Wp) zero-padded copy of an (N, C, H, W) array."""
    n, c, h, w = xd.shape
    xt = np.zeros((c, n, h + 2 * padding, w + 2 * padding))
    xt[:, :, padding:padding + h, padding:padding + w] = xd.transpose(1, 0, 2, 3)
    return xt


def _im2col(xt: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns laid out as (C*kh*kw, N*ho*wo) from a (C, N, Hp, Wp) input."""
    c, n = xt.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _shift_buffer(xd: np.ndarray, kw: int, padding: int) -> np.ndarray:
    """(C*kw, Hp*N*wo) buffer: zero-padded input, one column shift per kernel column."""
    n, c, h, w = xd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    wo = wp - kw + 1
    xt = np.zeros((c, hp, n, wp))
    xt[:, padding:padding + h, :, padding:padding + w] = xd.transpose(1, 2, 0, 3)
    shifts = np.empty((c, kw, hp, n, wo))
    for j in range(kw):
        shifts[:, j] = xt[:, :, :, j:j + wo]
    return shifts.reshape(c * kw, hp * n * wo)


def _conv_rows_forward(xd: np.ndarray, k: np.ndarray, padding: int):
    """Stride-1 conv via kernel-row matmuls over a (C*kw, Hp*N*wo) shift buffer.

    Rows ``i .. i+ho`` of the buffer form a contiguous column range, so each
    kernel row is one BLAS call without copying.
    """
    n, c, h, w = xd.shape
    o, _, kh, kw = k.shape
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    shifts = _shift_buffer(xd, kw, padding)
    row = n * wo
    out = k[:, :, 0].reshape(o, c * kw) @ shifts[:, :ho * row]
    for i in range(1, kh):
        out += k[:, :, i].reshape(o, c * kw) @ shifts[:, i * row:(i + ho) * row]
    return out, shifts


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with symmetric zero padding.

    ``x`` is (N, C, H, W), ``kernel`` is (O, C, kh, kw), ``bias`` is (O,).
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {kernel.shape}",
                         expected=kernel.shape, got=x.shape)
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels but kernel {kernel.shape} expects {ci}",
                         expected=kernel.shape, got=x.shape)
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}",
                         expected=(o,), got=bias.shape)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} / padding={padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}",
                         expected=kernel.shape, got=x.shape)

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if stride == 1 and not pointwise and kh == kw and padding <= kh - 1:
        return _conv2d_rows(x, kernel, bias, padding, ho, wo)
    hp, wp = h + 2 * padding, w + 2 * padding

    def columns() -> np.ndarray:
        xt = _padded_cnhw(x.data, padding)
        return xt.reshape(c, n * h * w) if pointwise else _im2col(xt, kh, kw, stride, ho, wo)

    k2 = kernel.data.reshape(o, c * kh * kw)
    out = k2 @ columns()
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def _bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gk = gb = gx = None
        if kernel.requires_grad:
            # columns are rebuilt from the retained input instead of being kept alive
            gk = (g2 @ columns().T).reshape(o, c, kh, kw)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            dcols = k2.T @ g2
            if pointwise:
                gx = dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                dcols = dcols.reshape(c, kh, kw, n, ho, wo)
                gpad = np.zeros((c, n, hp, wp))
                for i in range(kh):
                    for j in range(kw):
                        gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
                gx = gpad[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor.from_op(out, parents, _bw, "conv2d")


def _conv2d_rows(x: Tensor, kernel: Tensor, bias: Tensor | None, padding: int,
                 ho: int, wo: int) -> Tensor:
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    kdata = kernel.data
    out2, _ = _conv_rows_forward(x.data, kdata, padding)
    if bias is not None:
        out2 += bias.data[:, None]
    out = np.ascontiguousarray(out2.reshape(o, ho, n, wo).transpose(2, 0, 1, 3))
    del out2
    row = n * wo

    def _bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 2, 0, 3)).reshape(o, ho * row)
        gk = gb = gx = None
        if kernel.requires_grad:
            # rebuilt rather than kept: the buffer is kw times the input
            shifts = _shift_buffer(x.data, kw, padding)
            gk = np.empty_like(kdata)
            for i in range(kh):
                gk[:, :, i] = (g2 @ shifts[:, i * row:(i + ho) * row].T).reshape(o, c, kw)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            # correlation of g with the flipped, transposed kernel
            flipped = np.ascontiguousarray(kdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx2, _ = _conv_rows_forward(g, flipped, kh - 1 - padding)
            gx = np.ascontiguousarray(gx2.reshape(c, h, n, w).transpose(2, 0, 1, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor.from_op(out, parents, _bw, "conv2d")


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place:
    ``running = (1 - momentum) * running + momentum * batch`` with the
    unbiased batch variance.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: input {x.shape} has {c} channels, state has {gamma.shape}",
                         expected=(c,), got=gamma.shape)
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    count = n * h * w
    if training:
        if count == 0:
            raise ShapeError(f"batch_norm: empty batch/spatial extent {x.shape} in train mode", got=x.shape)
        mu = x.data.mean(axis=(0, 2, 3))
        xhat = x.data - mu[None, :, None, None]
        var = np.einsum("nchw,nchw->c", xhat, xhat) / count
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.copy()
        var = running_var.copy()
        xhat = x.data - mu[None, :, None, None]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std[None, :, None, None]
    gd = gamma.data
    out = xhat * gd[None, :, None, None]
    out += beta.data[None, :, None, None]
    del xhat

    def _bw(g):
        # recomputed from the retained input rather than stored
        xhat = x.data - mu[None, :, None, None]
        xhat *= inv_std[None, :, None, None]
        gg = np.einsum("nchw,nchw->c", g, xhat)
        gbeta = g.sum(axis=(0, 2, 3))
        scale_ = (gd * inv_std)[None, :, None, None]
        if training:
            gx = xhat * (-gg / count)[None, :, None, None]
            gx += g
            gx -= (gbeta / count)[None, :, None, None]
            gx *= scale_
        else:
            gx = g * scale_
        return gx, gg, gbeta

    return Tensor.from_op(out, (x, gamma, beta), _bw, "batch_norm")


# ---------------------------------------------------------------------------
# pooling / resampling


def _max_1d(x: np.ndarray, k: int, s: int, axis: int) -> tuple[np.ndarray, np.ndarray]:
    size = (x.shape[axis] - k) // s + 1
    index = [slice(None)] * x.ndim
    wins = []
    for t in range(k):
        index[axis] = slice(t, t + s * (size - 1) + 1, s)
        wins.append(x[tuple(index)])
    out = wins[0].copy()
    for win in wins[1:]:
        np.maximum(out, win, out=out)
    arg = np.zeros(out.shape, dtype=np.int8)
    # descending so the smallest matching offset is written last
    for t in range(k - 1, 0, -1):
        np.copyto(arg, t, where=wins[t] == out)
    first = wins[0] == out
    arg[first] = 0
    return out, arg


def _max_1d_backward(g: np.ndarray, arg: np.ndarray, k: int, s: int, axis: int, length: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] = length
    gin = np.zeros(shape)
    index = [slice(None)] * g.ndim
    size = g.shape[axis]
    for t in range(k):
        index[axis] = slice(t, t + s * (size - 1) + 1, s)
        gin[tuple(index)] += np.where(arg == t, g, 0.0)
    return gin


def max_pool(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Windowed maximum; padded cells never win (-inf).

    Backward routes each output gradient to the first maximal input in
    row-major window order. Computed as a column pass followed by a row
    pass, which picks the same winner.
    """
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError(f"max_pool: bad kernel={kernel} stride={stride} padding={padding}")
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kernel > hp or kernel > wp:
        raise ShapeError(f"max_pool: kernel {kernel} larger than padded extent {(hp, wp)}",
                         expected=(kernel, kernel), got=(hp, wp))
    xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  constant_values=-np.inf) if padding else x.data
    rowmax, arg_w = _max_1d(xpad, kernel, stride, axis=3)
    out, arg_h = _max_1d(rowmax, kernel, stride, axis=2)

    def _bw(g):
        g_rows = _max_1d_backward(g, arg_h, kernel, stride, 2, hp)
        gpad = _max_1d_backward(g_rows, arg_w, kernel, stride, 3, wp)
        if padding:
            gpad = np.ascontiguousarray(gpad[:, :, padding:padding + h, padding:padding + w])
        return (gpad,)

    return Tensor.from_op(out, (x,), _bw, "max_pool")


def upsample_zero_pad(x: Tensor, n: int) -> Tensor:
    """Place each value in the top-left of an n x n cell, zeros elsewhere."""
    if n < 1:
        raise ValueError(f"upsample factor must be >= 1, got {n}")
    b, c, h, w = x.shape
    out = np.zeros((b, c, h * n, w * n))
    out[:, :, ::n, ::n] = x.data
    return Tensor.from_op(out, (x,), lambda g: (np.ascontiguousarray(g[:, :, ::n, ::n]),),
                          "upsample_zero_pad")


def upsample_direct_copy(x: Tensor, n: int) -> Tensor:
    """Replicate each value over its n x n cell."""
    if n < 1:
        raise ValueError(f"upsample factor must be >= 1, got {n}")
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, n, axis=2), n, axis=3)

    def _bw(g):
        return (g.reshape(b, c, h, n, w, n).sum(axis=(3, 5)),)

    return Tensor.from_op(out, (x,), _bw, "upsample_direct_copy")


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean negative log-softmax of the true class over non-ignored pixels."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}",
                         expected=(n, h, w), got=labels.shape)
    valid = labels != ignore_index
    if not valid.any():
        raise ValueError("softmax_cross_entropy: every pixel is ignored")
    if (labels[valid] < 0).any() or (labels[valid] >= k).any():
        raise ValueError(f"labels must lie in [0, {k}) or equal ignore_index={ignore_index}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    loss = -(picked * valid).sum() / count
    if not np.isfinite(loss):
        raise NonFiniteError("softmax_cross_entropy produced a non-finite loss")

    def _bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        grad *= valid[:, None]
        return (grad * (float(g) / count),)

    return Tensor.from_op(np.asarray(loss), (logits,), _bw, "softmax_cross_entropy")
