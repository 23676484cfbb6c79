"""Differentiable 3D layer primitives.

All operations work on dense float32 arrays with axes
(batch, channel, time, height, width) and are pure functions: identical
inputs produce bit-identical outputs. Each primitive ships with an exact
vector-Jacobian product so full input gradients can be composed by hand in
reverse order, without a general autodiff tape.

Convolution is cross-correlation with zero padding, evaluated as im2col plus
a BLAS matmul per channel group. Max pooling pads with -inf so padded
positions never win, and breaks ties by the smallest flat input index.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConsistencyError, GeometryError, ShapeError
from .validation import check_tensor5


@dataclass(frozen=True)
class ConvGeometry:
    """Kernel/stride/padding triples (time, height, width) plus channel groups."""

    kernel: tuple
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        for name, triple in (("kernel", self.kernel), ("stride", self.stride)):
            if len(triple) != 3 or any(int(v) < 1 for v in triple):
                raise GeometryError(f"{name} must be three positive ints, got {triple}")
        if len(self.padding) != 3 or any(int(v) < 0 for v in self.padding):
            raise GeometryError(f"padding must be three non-negative ints, got {self.padding}")
        if self.groups < 1:
            raise GeometryError(f"groups must be positive, got {self.groups}")

    def output_shape(self, extents) -> tuple:
        """Output (t, h, w) for the given input extents; errors if any is < 1."""
        out = []
        for e, k, s, p in zip(extents, self.kernel, self.stride, self.padding):
            o = (e + 2 * p - k) // s + 1
            if o < 1:
                raise GeometryError(
                    f"kernel {self.kernel} stride {self.stride} padding {self.padding} "
                    f"yields empty output for input extents {tuple(extents)}"
                )
            out.append(o)
        return tuple(out)


def _pad5(x, padding, value=0.0):
    pt, ph, pw = padding
    if pt == ph == pw == 0:
        return x
    return np.pad(
        x,
        ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)),
        constant_values=np.float32(value),
    )


def _windows(xp, kernel, stride):
    """Sliding-window view (n, c, ot, oh, ow, kt, kh, kw) over a padded array."""
    n, c, t, h, w = xp.shape
    kt, kh, kw = kernel
    st, sh, sw = stride
    ot = (t - kt) // st + 1
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    sn, sc, stt, shh, sww = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ot, oh, ow, kt, kh, kw),
        strides=(sn, sc, st * stt, sh * shh, sw * sww, stt, shh, sww),
        writeable=False,
    )


def _check_conv_args(x, kernel, geom):
    x = check_tensor5(x, "conv input")
    kernel = np.asarray(kernel, dtype=np.float32)
    if kernel.ndim != 5:
        raise ShapeError(f"conv kernel must have 5 axes (cout, cin/groups, kt, kh, kw), got {kernel.shape}")
    cin = x.shape[1]
    cout = kernel.shape[0]
    g = geom.groups
    if cin % g or cout % g:
        raise ShapeError(f"groups={g} must divide in_channels={cin} and out_channels={cout}")
    if kernel.shape[1] != cin // g:
        raise ShapeError(f"kernel expects {kernel.shape[1]} channels per group, input provides {cin // g}")
    if tuple(kernel.shape[2:]) != tuple(geom.kernel):
        raise ShapeError(f"kernel spatial dims {kernel.shape[2:]} disagree with geometry {geom.kernel}")
    return x, kernel


def _im2col(v_group):
    """Materialize windows (n, cg, ot, oh, ow, kt, kh, kw) as a GEMM operand."""
    n, cg, ot, oh, ow, kt, kh, kw = v_group.shape
    col = v_group.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * ot * oh * ow, cg * kt * kh * kw)
    return np.ascontiguousarray(col)


def conv3d(x, kernel, bias, geom: ConvGeometry) -> np.ndarray:
    """Grouped 3D cross-correlation with zero padding.

    ``x``: (n, cin, t, h, w); ``kernel``: (cout, cin/groups, kt, kh, kw);
    ``bias``: (cout,). Returns (n, cout, ot, oh, ow).
    """
    x, kernel = _check_conv_args(x, kernel, geom)
    bias = np.asarray(bias, dtype=np.float32)
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias must have shape ({kernel.shape[0]},), got {bias.shape}")
    n, cin = x.shape[:2]
    cout = kernel.shape[0]
    ot, oh, ow = geom.output_shape(x.shape[2:])
    g = geom.groups
    cg, cog = cin // g, cout // g

    xp = _pad5(x, geom.padding)
    v = _windows(xp, geom.kernel, geom.stride)
    out = np.empty((n, cout, ot, oh, ow), dtype=np.float32)
    for gi in range(g):
        col = _im2col(v[:, gi * cg:(gi + 1) * cg])
        wmat = kernel[gi * cog:(gi + 1) * cog].reshape(cog, -1)
        og = col @ wmat.T
        out[:, gi * cog:(gi + 1) * cog] = og.reshape(n, ot, oh, ow, cog).transpose(0, 4, 1, 2, 3)
    out += bias.reshape(1, -1, 1, 1, 1)
    return out


def _col2im(grad_col, in_shape, geom, out_shape):
    """Scatter-add GEMM-layout gradients back onto the (padded) input."""
    n, cg = in_shape[0], in_shape[1]
    kt, kh, kw = geom.kernel
    st, sh, sw = geom.stride
    pt, ph, pw = geom.padding
    ot, oh, ow = out_shape
    t, h, w = in_shape[2:]
    g6 = grad_col.reshape(n, ot, oh, ow, cg, kt, kh, kw).transpose(0, 4, 1, 2, 3, 5, 6, 7)
    gp = np.zeros((n, cg, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=np.float32)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                gp[:, :, i:i + ot * st:st, j:j + oh * sh:sh, k:k + ow * sw:sw] += g6[..., i, j, k]
    return gp[:, :, pt:pt + t, ph:ph + h, pw:pw + w]


def conv3d_vjp(x, kernel, geom: ConvGeometry, upstream,
               need_input=True, need_kernel=True, need_bias=True):
    """Gradients of ``sum(upstream * conv3d(x, kernel, bias, geom))``.

    Returns ``(grad_input, grad_kernel, grad_bias)``; entries not requested
    via the ``need_*`` flags are None. The forward bias does not influence
    any of the three gradients.
    """
    x, kernel = _check_conv_args(x, kernel, geom)
    n, cin = x.shape[:2]
    cout = kernel.shape[0]
    ot, oh, ow = geom.output_shape(x.shape[2:])
    upstream = np.asarray(upstream, dtype=np.float32)
    if upstream.shape != (n, cout, ot, oh, ow):
        raise ShapeError(f"upstream must have shape {(n, cout, ot, oh, ow)}, got {upstream.shape}")
    g = geom.groups
    cg, cog = cin // g, cout // g

    grad_bias = upstream.sum(axis=(0, 2, 3, 4)) if need_bias else None
    grad_kernel = np.empty_like(kernel) if need_kernel else None
    grad_input = np.empty_like(x) if need_input else None

    v = _windows(_pad5(x, geom.padding), geom.kernel, geom.stride) if need_kernel else None
    for gi in range(g):
        osl = slice(gi * cog, (gi + 1) * cog)
        isl = slice(gi * cg, (gi + 1) * cg)
        up_mat = np.ascontiguousarray(
            upstream[:, osl].transpose(0, 2, 3, 4, 1).reshape(n * ot * oh * ow, cog)
        )
        if need_kernel:
            col = _im2col(v[:, isl])
            grad_kernel[osl] = (up_mat.T @ col).reshape(cog, cg, *geom.kernel)
        if need_input:
            wmat = kernel[osl].reshape(cog, -1)
            grad_col = up_mat @ wmat
            gshape = (n, cg) + tuple(x.shape[2:])
            grad_input[:, isl] = _col2im(grad_col, gshape, geom, (ot, oh, ow))
    return grad_input, grad_kernel, grad_bias


def maxpool3d(x, geom: ConvGeometry):
    """Max pooling; returns (output, argmax_indices).

    ``argmax_indices[n, c, jt, jh, jw]`` is the flat (t*H*W + h*W + w) input
    position that produced the output value, with ties resolved to the
    smallest flat index. Padding uses -inf so it never wins a window.
    """
    x = check_tensor5(x, "pool input")
    n, c, t, h, w = x.shape
    for p, k in zip(geom.padding, geom.kernel):
        if p >= k:
            raise GeometryError(f"pool padding {geom.padding} must stay below kernel {geom.kernel}")
    ot, oh, ow = geom.output_shape((t, h, w))
    kt, kh, kw = geom.kernel
    kk = kt * kh * kw

    xp = _pad5(x, geom.padding, value=-np.inf)
    v = _windows(xp, geom.kernel, geom.stride)
    flat_windows = v.reshape(n, c, ot, oh, ow, kk)
    arg = flat_windows.argmax(axis=-1)
    out = np.take_along_axis(flat_windows, arg[..., None], axis=-1)[..., 0]

    # Window slot -> flat input index, precomputed once per geometry call.
    dt, dh, dw = np.unravel_index(np.arange(kk), (kt, kh, kw))
    st, sh, sw = geom.stride
    pt, ph, pw = geom.padding
    t_in = (np.arange(ot) * st - pt)[:, None, None, None] + dt
    h_in = (np.arange(oh) * sh - ph)[None, :, None, None] + dh
    w_in = (np.arange(ow) * sw - pw)[None, None, :, None] + dw
    table = (t_in * (h * w) + h_in * w + w_in).astype(np.int64)
    indices = np.take_along_axis(
        np.broadcast_to(table, (n, c) + table.shape), arg[..., None], axis=-1
    )[..., 0]
    return np.ascontiguousarray(out), indices


def maxpool3d_vjp(argmax_indices, upstream, input_dims) -> np.ndarray:
    """Route upstream values to their argmax positions, accumulating on collisions."""
    n, c, t, h, w = input_dims
    upstream = np.asarray(upstream, dtype=np.float32)
    if argmax_indices.shape != upstream.shape or argmax_indices.shape[:2] != (n, c):
        raise ShapeError(
            f"argmax {argmax_indices.shape} / upstream {upstream.shape} inconsistent with dims {tuple(input_dims)}"
        )
    flat_size = t * h * w
    if argmax_indices.min() < 0 or argmax_indices.max() >= flat_size:
        raise ConsistencyError("pooling argmax index outside the input volume")
    grad = np.zeros((n * c, flat_size), dtype=np.float32)
    rows = np.repeat(np.arange(n * c), argmax_indices[0, 0].size)
    np.add.at(grad, (rows, argmax_indices.reshape(-1)), upstream.reshape(-1))
    return grad.reshape(n, c, t, h, w)


def relu(x) -> np.ndarray:
    """Elementwise max(x, 0)."""
    return np.maximum(np.asarray(x, dtype=np.float32), np.float32(0))


def relu_vjp(x, upstream) -> np.ndarray:
    """Pass upstream where x > 0; the derivative at exactly 0 is 0."""
    x = np.asarray(x, dtype=np.float32)
    upstream = np.asarray(upstream, dtype=np.float32)
    if x.shape != upstream.shape:
        raise ShapeError(f"relu_vjp shapes differ: {x.shape} vs {upstream.shape}")
    return np.where(x > 0, upstream, np.float32(0))


def head(x, weight, bias) -> np.ndarray:
    """Global average pool over (t, h, w) followed by an affine map to logits."""
    x = check_tensor5(x, "head input")
    weight = np.asarray(weight, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"head weight must be (classes, {x.shape[1]}), got {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"head bias must be ({weight.shape[0]},), got {bias.shape}")
    pooled = x.mean(axis=(2, 3, 4))
    return pooled @ weight.T + bias


def head_vjp(x, weight, upstream):
    """Gradients of ``sum(upstream * head(x, weight, bias))`` -> (input, weight, bias)."""
    x = check_tensor5(x, "head input")
    weight = np.asarray(weight, dtype=np.float32)
    upstream = np.asarray(upstream, dtype=np.float32)
    n, c, t, h, w = x.shape
    if upstream.shape != (n, weight.shape[0]):
        raise ShapeError(f"upstream must be ({n}, {weight.shape[0]}), got {upstream.shape}")
    count = np.float32(t * h * w)
    grad_pooled = (upstream @ weight) / count
    grad_input = np.empty_like(x)
    grad_input[:] = grad_pooled[:, :, None, None, None]
    pooled = x.mean(axis=(2, 3, 4))
    grad_weight = upstream.T @ pooled
    grad_bias = upstream.sum(axis=0)
    return grad_input, grad_weight, grad_bias


def softmax_cross_entropy(logits, labels):
    """Summed cross-entropy over the batch with 1-based integer labels.

    Returns ``(loss, grad_logits)`` where each gradient row is
    ``softmax(row) - onehot(label)``; rows therefore sum to zero and a
    duplicated sample receives the same gradient as it would alone.
    """
    logits = np.asarray(logits, dtype=np.float32)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits[None]
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (n, classes), got {logits.shape}")
    n, num_classes = logits.shape
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 1 or labels.max() > num_classes:
        raise ValueError(f"labels must lie in [1, {num_classes}]")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    cols = labels - 1
    loss = float(-log_probs[rows, cols].sum())
    grad = np.exp(log_probs)
    grad[rows, cols] -= 1.0
    if squeeze:
        grad = grad[0]
    return loss, grad.astype(np.float32, copy=False)


def finite_difference_gradient(f, x, step) -> np.ndarray:
    """Central-difference gradient of a scalar function; test/calibration oracle."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float32)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(x))
        flat[i] = orig - step
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad.astype(np.float32)
