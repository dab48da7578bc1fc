"""Neural network layers: fused forward/backward kernels plus module plumbing.

Convolution is im2col plus one BLAS matmul. Spatial tensors come in two
conventions: channels-first (N, C, H, W), the default and the layout of
every public feature-map contract, and channels-last (N, H, W, C), which
the backbone uses internally because window extraction then copies whole
C-sized runs instead of scattered 4-byte elements. The column matrix is
gathered through a strided window view in one copy pass and kept from the
forward pass, so the weight gradient is a single transposed matmul
against it. The input gradient of a stride-1 convolution is computed as
one more convolution (gradient padded by K-1-P, kernel rotated 180
degrees with channels swapped); strided convolutions fall back to one
small matmul per kernel offset plus a strided scatter-add, the exact
adjoint of the extraction.

Max pooling runs as K*K running maxima over shifted slices; its backward
walks the same slices in window order and routes each output gradient to
the first position that attains the maximum, i.e. ties resolve to the
lowest flat index within the window. Batch normalization folds scale and
statistics into a single per-channel multiply-add, and its backward is
expressed the same way, so neither direction materializes a normalized
copy of the input.

Modules mirror the familiar container design: assigning a Parameter or a
Module to an attribute registers it, state_dict round-trips everything,
and to_dtype switches a whole tree to float64 for gradient checking.
Layers draw their initial weights from an explicitly passed generator so
that model construction is reproducible from a single seed.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import BadTargetError, BatchTooSmallError, ShapeMismatchError
from .tensor import Tensor, accumulate_grad, from_op

# ---------------------------------------------------------------------------
# functional kernels


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        accumulate_grad(x, g * mask)

    return from_op(np.maximum(x.data, 0), (x,), bw)


def _pad_hw(a: np.ndarray, ph: int, pw: int, hax: int, value: float = 0.0) -> np.ndarray:
    """Pad axes (hax, hax+1) by (ph, pw), filling the border with `value`.

    Equivalent to np.pad with constant_values but writes only the border
    ring instead of zero-filling the whole buffer, and skips np.pad's
    per-axis dispatch, which is measurable at training call rates.
    """
    if ph == 0 and pw == 0:
        return a
    shape = list(a.shape)
    h, w = shape[hax], shape[hax + 1]
    shape[hax] += 2 * ph
    shape[hax + 1] += 2 * pw
    out = np.empty(shape, dtype=a.dtype)
    base = [slice(None)] * a.ndim

    def region(i0, i1, j0=None, j1=None):
        s = list(base)
        s[hax] = slice(i0, i1)
        if j0 is not None or j1 is not None:
            s[hax + 1] = slice(j0, j1)
        return tuple(s)

    if ph:
        out[region(0, ph)] = value
        out[region(h + ph, None)] = value
    if pw:
        out[region(ph, h + ph, 0, pw)] = value
        out[region(ph, h + ph, w + pw, None)] = value
    out[region(ph, h + ph, pw, w + pw)] = a
    return out


def to_channels_last(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H, W, C). Free of copies when C == 1."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"to_channels_last expects a 4-d input, got {x.shape}")

    def bw(g):
        accumulate_grad(x, np.ascontiguousarray(np.moveaxis(g, 3, 1)))

    return from_op(np.ascontiguousarray(np.moveaxis(x.data, 1, 3)), (x,), bw)


def to_channels_first(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, C, H, W)."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"to_channels_first expects a 4-d input, got {x.shape}")

    def bw(g):
        accumulate_grad(x, np.ascontiguousarray(np.moveaxis(g, 1, 3)))

    return from_op(np.ascontiguousarray(np.moveaxis(x.data, 3, 1)), (x,), bw)


def _conv_geometry(h, w, kh, kw, stride, padding):
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"conv2d: kernel {kh}x{kw} with padding {padding} does not fit {h}x{w}"
        )
    return ho, wo


def _im2col_nchw(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Extract conv windows from a padded NCHW array as (N, C*kh*kw, ho*wo)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im_nchw(
    dcols: np.ndarray,
    x_shape: tuple,
    kh: int,
    kw: int,
    stride: int,
    padding: int,
    ho: int,
    wo: int,
) -> np.ndarray:
    """Adjoint of _im2col_nchw: scatter-add column gradients back into NCHW."""
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d6[
                :, :, i, j
            ]
    if padding == 0:
        return dxp
    return dxp[:, :, padding : padding + h, padding : padding + w]


def _conv2d_nchw(x, weight, stride, padding, bias, n, c, h, w, o, kh, kw, ho, wo):
    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data if stride == 1 else x.data[:, :, ::stride, ::stride]
        x3 = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
        w2 = weight.data.reshape(o, c)
        out = np.matmul(w2, x3).reshape(n, o, ho, wo)
        if bias is not None:
            np.add(out, bias.data.reshape(1, o, 1, 1), out=out)

        def bw(g):
            g3 = g.reshape(n, o, ho * wo)
            if weight.requires_grad:
                dw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0)
                accumulate_grad(weight, dw.reshape(weight.data.shape))
            if x.requires_grad:
                dx3 = np.matmul(w2.T, g3).reshape(n, c, ho, wo)
                if stride == 1:
                    accumulate_grad(x, dx3)
                else:
                    dx = np.zeros(x.shape, dtype=g.dtype)
                    dx[:, :, ::stride, ::stride] = dx3
                    accumulate_grad(x, dx)
            if bias is not None and bias.requires_grad:
                accumulate_grad(bias, g.sum(axis=(0, 2, 3)))

        return out, bw

    xp = _pad_hw(x.data, padding, padding, 2)
    cols = _im2col_nchw(xp, kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)
    if bias is not None:
        np.add(out, bias.data.reshape(1, o, 1, 1), out=out)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        if weight.requires_grad:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            accumulate_grad(weight, dw.reshape(weight.data.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            accumulate_grad(
                x, _col2im_nchw(dcols, x.shape, kh, kw, stride, padding, ho, wo)
            )
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))

    return out, bw


def _conv2d_nhwc_1x1(x, weight, stride, bias, n, c, o, ho, wo):
    xs = x.data if stride == 1 else x.data[:, ::stride, ::stride, :]
    x2 = np.ascontiguousarray(xs).reshape(n * ho * wo, c)
    w2 = weight.data.reshape(o, c)
    out = x2 @ w2.T
    if bias is not None:
        np.add(out, bias.data, out=out)
    out = out.reshape(n, ho, wo, o)

    def bw(g):
        g2 = g.reshape(n * ho * wo, o)
        if weight.requires_grad:
            accumulate_grad(weight, (g2.T @ x2).reshape(weight.data.shape))
        if x.requires_grad:
            dx2 = (g2 @ w2).reshape(n, ho, wo, c)
            if stride == 1:
                accumulate_grad(x, dx2)
            else:
                dx = np.zeros(x.shape, dtype=g.dtype)
                dx[:, ::stride, ::stride, :] = dx2
                accumulate_grad(x, dx)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g2.sum(axis=0))

    return out, bw


def _conv2d_nhwc_single_channel(x, weight, stride, padding, bias, n, h, w, o, kh, kw, ho, wo):
    """1-input-channel case: the window gather drops the channel axis.

    With one channel the general path's (kw, c) write runs would shrink to
    4 bytes, so gather (kh, kw) windows from the unchannelled image
    instead; each kh row is still a kw-float run and the writes stay fully
    contiguous.
    """
    s = stride
    xp = _pad_hw(x.data.reshape(n, h, w), padding, padding, 1)
    l = ho * wo
    hp, wp = h + 2 * padding, w + 2 * padding
    it = xp.itemsize
    win = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, kh, kw), (hp * wp * it, s * wp * it, s * it, wp * it, it)
    )
    cols2 = win.reshape(n * l, kh * kw)
    w2 = weight.data.reshape(o, kh * kw)
    out = cols2 @ w2.T
    if bias is not None:
        np.add(out, bias.data, out=out)
    out = out.reshape(n, ho, wo, o)

    def bw(g):
        g2 = g.reshape(n * l, o)
        if weight.requires_grad:
            accumulate_grad(weight, (g2.T @ cols2).reshape(weight.data.shape))
        if x.requires_grad:
            dcols = g2 @ w2
            dxp = np.zeros((n, hp, wp), dtype=g.dtype)
            for k in range(kh * kw):
                i, j = divmod(k, kw)
                dxp[:, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, k].reshape(
                    n, ho, wo
                )
            if padding:
                dxp = dxp[:, padding : padding + h, padding : padding + w]
            accumulate_grad(x, dxp.reshape(x.shape))
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g2.sum(axis=0))

    return out, bw


def _conv2d_nhwc(x, weight, stride, padding, bias, n, c, h, w, o, kh, kw, ho, wo):
    if kh == 1 and kw == 1 and padding == 0:
        return _conv2d_nhwc_1x1(x, weight, stride, bias, n, c, o, ho, wo)
    if c == 1:
        return _conv2d_nhwc_single_channel(
            x, weight, stride, padding, bias, n, h, w, o, kh, kw, ho, wo
        )

    s = stride
    xp = _pad_hw(x.data, padding, padding, 1)
    hp, wp = h + 2 * padding, w + 2 * padding
    # Gather the (kh, kw, c) window of every output position through a
    # strided view; the reshape collapses it to the gemm matrix in one
    # copy pass with contiguous writes (each (kw, c) slab is one run).
    it = xp.itemsize
    win = np.lib.stride_tricks.as_strided(
        xp,
        (n, ho, wo, kh, kw, c),
        (hp * wp * c * it, s * wp * c * it, s * c * it, wp * c * it, c * it, it),
    )
    cols2 = win.reshape(n * ho * wo, kh * kw * c)
    # weight rows reordered to match the (position, channel) column layout
    w2 = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = cols2 @ w2
    if bias is not None:
        np.add(out, bias.data, out=out)
    out = out.reshape(n, ho, wo, o)

    def bw(g):
        g2 = g.reshape(n * ho * wo, o)
        if weight.requires_grad:
            dw = (cols2.T @ g2).reshape(kh, kw, c, o)
            accumulate_grad(weight, np.ascontiguousarray(dw.transpose(3, 2, 0, 1)))
        if x.requires_grad:
            qh, qw = kh - 1 - padding, kw - 1 - padding
            if s == 1 and qh >= 0 and qw >= 0:
                # The input gradient of a stride-1 correlation is itself a
                # stride-1 correlation: pad the output gradient by k-1-p
                # and correlate with the kernel rotated 180 degrees, in
                # and out channels swapped. One gather plus one gemm, no
                # scatter accumulation.
                gp = _pad_hw(g, qh, qw, 1)
                hg, wg = ho + 2 * qh, wo + 2 * qw
                gt = gp.itemsize
                gwin = np.lib.stride_tricks.as_strided(
                    gp,
                    (n, h, w, kh, kw, o),
                    (hg * wg * o * gt, wg * o * gt, o * gt, wg * o * gt, o * gt, gt),
                )
                gcols = gwin.reshape(n * h * w, kh * kw * o)
                wflip = weight.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)
                dx = gcols @ np.ascontiguousarray(wflip).reshape(kh * kw * o, c)
                accumulate_grad(x, dx.reshape(n, h, w, c))
            else:
                # Strided case: one small gemm per kernel offset; each dk
                # is contiguous, so the scatter reads stream.
                dxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
                for k in range(kh * kw):
                    i, j = divmod(k, kw)
                    dk = g2 @ w2[k * c : (k + 1) * c, :].T
                    dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dk.reshape(
                        n, ho, wo, c
                    )
                if padding:
                    dxp = dxp[:, padding : padding + h, padding : padding + w, :]
                accumulate_grad(x, np.ascontiguousarray(dxp))
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g2.sum(axis=0))

    return out, bw


def conv2d(
    x: Tensor,
    weight: Tensor,
    stride: int = 1,
    padding: int = 0,
    bias=None,
    channels_last: bool = False,
) -> Tensor:
    """Cross-correlation with an (out, in, K, K) weight.

    The input is (N, C, H, W), or (N, H, W, C) when channels_last is set;
    the output uses the same convention as the input. The weight layout
    does not depend on the convention, so checkpoints are interchangeable.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}"
        )
    if channels_last:
        n, h, w, c = x.shape
    else:
        n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeMismatchError(f"conv2d: input has {c} channels, weight expects {ci}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ho, wo = _conv_geometry(h, w, kh, kw, stride, padding)

    if channels_last:
        out, bw = _conv2d_nhwc(x, weight, stride, padding, bias, n, c, h, w, o, kh, kw, ho, wo)
    else:
        out, bw = _conv2d_nchw(x, weight, stride, padding, bias, n, c, h, w, o, kh, kw, ho, wo)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return from_op(out, inputs, bw)


def linear(x: Tensor, weight: Tensor, bias=None) -> Tensor:
    """Affine map of a (B, in) batch by an (out, in) weight."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        np.add(out, bias.data, out=out)

    def bw(g):
        if x.requires_grad:
            accumulate_grad(x, g @ weight.data)
        if weight.requires_grad:
            accumulate_grad(weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return from_op(out, inputs, bw)


def maxpool2d(
    x: Tensor, kernel_size: int, stride: int, padding: int = 0, channels_last: bool = False
) -> Tensor:
    """Max pooling; ties route the gradient to the lowest window index.

    Forward is a running maximum over the K*K shifted slices. Backward
    revisits the slices in the same window order and hands the gradient to
    the first position matching the maximum, masking positions already
    claimed, which reproduces the lowest-flat-index tie rule exactly.
    """
    if x.ndim != 4:
        raise ShapeMismatchError(f"maxpool2d expects a 4-d input, got {x.shape}")
    if padding >= kernel_size:
        raise ValueError("padding must be smaller than the pooling kernel")
    if channels_last:
        n, h, w, c = x.shape
    else:
        n, c, h, w = x.shape
    k, s, p = kernel_size, stride, padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(f"maxpool2d: kernel {k} does not fit {h}x{w}")

    fill = -np.inf if p else 0.0
    if channels_last:
        out_shape = (n, ho, wo, c)
        hax = 1

        def window(arr, i, j):
            return arr[:, i : i + s * ho : s, j : j + s * wo : s, :]

    else:
        out_shape = (n, c, ho, wo)
        hax = 2

        def window(arr, i, j):
            return arr[:, :, i : i + s * ho : s, j : j + s * wo : s]

    xp = _pad_hw(x.data, p, p, hax, fill)
    out = np.full(out_shape, -np.inf, dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            np.maximum(out, window(xp, i, j), out=out)

    def bw(g):
        # Branch-free routing: post-relu inputs are full of exact ties, so
        # dense-mask ufunc `where=` kwargs hit their scalar fallback here;
        # multiplying by the mask keeps every pass vectorized.
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        taken = np.zeros(out_shape, dtype=bool)
        hit = np.empty(out_shape, dtype=bool)
        free = np.empty(out_shape, dtype=bool)
        contrib = np.empty(out_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                np.equal(window(xp, i, j), out, out=hit)
                np.logical_not(taken, out=free)
                np.logical_and(hit, free, out=hit)
                np.multiply(g, hit, out=contrib)
                window(dxp, i, j)[...] += contrib
                np.logical_or(taken, hit, out=taken)
        if p:
            if channels_last:
                dxp = dxp[:, p : p + h, p : p + w, :]
            else:
                dxp = dxp[:, :, p : p + h, p : p + w]
        accumulate_grad(x, np.ascontiguousarray(dxp))

    return from_op(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dimensions of an NCHW tensor, giving (N, C)."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool expects an NCHW input, got {x.shape}")
    n, c, h, w = x.shape

    def bw(g):
        accumulate_grad(
            x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy()
        )

    return from_op(x.data.mean(axis=(2, 3)), (x,), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    channels_last: bool = False,
) -> Tensor:
    """Batch normalization per channel over all remaining axes.

    Accepts (N, C) inputs, (N, C, H, W) by default, or (N, H, W, C) when
    channels_last is set. Train mode normalizes by batch statistics
    (biased variance) and updates the running buffers in place, using the
    unbiased variance for the running estimate. Eval mode normalizes by
    the running buffers.

    Both directions are folded into per-channel affine maps. Forward is

        out = a*x + b,  a = gamma*inv_std,  b = beta - mean*a

    and the train-mode input gradient, after substituting xhat = (x-mean)
    *inv_std into the usual three-term expression, collapses to the same
    shape with per-channel coefficients:

        dx = a*g - f*x + e,  f = a*inv_std*dgamma/m,  e = f*mean - a*sum(g)/m

    so neither pass materializes a normalized copy of the input.
    """
    if x.ndim == 4:
        ch = x.shape[3] if channels_last else x.shape[1]
        axes = (0, 1, 2) if channels_last else (0, 2, 3)
        bshape = (1, 1, 1, ch) if channels_last else (1, ch, 1, 1)
        sum_spec = "nhwc,nhwc->c" if channels_last else "nchw,nchw->c"
        red_spec = "nhwc->c" if channels_last else "nchw->c"
    elif x.ndim == 2:
        ch = x.shape[1]
        axes = (0,)
        bshape = (1, ch)
        sum_spec = "nc,nc->c"
        red_spec = "nc->c"
    else:
        raise ShapeMismatchError(f"batch_norm expects a 2-d or 4-d input, got {x.shape}")
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeMismatchError(
            f"batch_norm: scale/shift must be ({ch},), got {gamma.shape}/{beta.shape}"
        )

    if training:
        if x.shape[0] < 2:
            raise BatchTooSmallError(
                "batch normalization in train mode needs at least 2 samples"
            )
        m = 1
        for ax in axes:
            m *= x.shape[ax]
        mean = np.einsum(red_spec, x.data) / m
        sq = np.einsum(sum_spec, x.data, x.data) / m
        var = np.maximum(sq - mean * mean, 0.0)
        inv_std = 1.0 / np.sqrt(var + eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        unbiased = var * (m / (m - 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.data.dtype)
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.data.dtype)
    a = gamma.data * inv_std
    out = x.data * a.reshape(bshape)
    out += (beta.data - mean * a).reshape(bshape)

    def bw(g):
        sg = np.einsum(red_spec, g)
        sgx = np.einsum(sum_spec, g, x.data)
        dgamma = inv_std * (sgx - mean * sg)
        if gamma.requires_grad:
            accumulate_grad(gamma, dgamma)
        if beta.requires_grad:
            accumulate_grad(beta, sg)
        if x.requires_grad:
            if training:
                f = a * inv_std * dgamma / m
                e = f * mean - a * sg / m
                dx = g * a.reshape(bshape)
                dx -= x.data * f.reshape(bshape)
                dx += e.reshape(bshape)
            else:
                dx = g * a.reshape(bshape)
            accumulate_grad(x, dx)

    return from_op(out, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax logits.

    Stabilized by row-max subtraction. Returns a scalar tensor.
    """
    if logits.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy expects (B, N) logits, got {logits.shape}")
    b, n = logits.shape
    if n < 2:
        raise ValueError("cross_entropy needs at least 2 classes")
    t = np.asarray(targets)
    if t.shape != (b,):
        raise ShapeMismatchError(f"cross_entropy: {b} logit rows but targets shape {t.shape}")
    if t.dtype.kind not in "iu":
        raise BadTargetError("targets must be integers")
    if t.min() < 0 or t.max() >= n:
        bad = t[(t < 0) | (t >= n)][0]
        raise BadTargetError(f"target {bad} outside [0, {n})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(b), t].mean()
    probs = np.exp(log_probs)

    def bw(g):
        d = probs.copy()
        d[np.arange(b), t] -= 1.0
        d *= float(g) / b
        accumulate_grad(logits, d)

    return from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain numpy softmax over the last axis (inference-side helper)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# module plumbing


class Parameter(Tensor):
    """A Tensor registered as trainable state when assigned to a Module."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
            self._modules.pop(name, None)
        elif isinstance(value, Module):
            self._modules[name] = value
            self._params.pop(name, None)
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def to_dtype(self, dtype):
        """Cast all parameters and float buffers in place; clears gradients."""
        for m in self.modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(m._buffers.items()):
                if b.dtype.kind == "f":
                    m.register_buffer(name, b.astype(dtype))
        return self

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict):
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        expected = set(own_params) | set(own_buffers)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise ValueError(
                f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in own_params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeMismatchError(
                    f"parameter {name}: expected shape {p.data.shape}, got {arr.shape}"
                )
            p.data = arr.astype(p.data.dtype)
            p.grad = None
        for name, b in own_buffers.items():
            arr = np.asarray(state[name])
            if arr.shape != b.shape:
                raise ShapeMismatchError(
                    f"buffer {name}: expected shape {b.shape}, got {arr.shape}"
                )
            b[...] = arr.astype(b.dtype)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        self.layers = ModuleList(modules)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = False,
        channels_last: bool = False,
        *,
        rng: np.random.Generator,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.channels_last = channels_last
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(
            _kaiming_uniform(
                rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in
            )
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride, self.padding, self.bias, self.channels_last)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, *, rng):
        super().__init__()
        self.weight = Parameter(_kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class _BatchNorm(Module):
    def __init__(
        self,
        num_features: int,
        momentum: float = 0.1,
        eps: float = 1e-5,
        channels_last: bool = False,
    ):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.channels_last = channels_last
        self.gamma = Parameter(np.ones(num_features, dtype=np.float32))
        self.beta = Parameter(np.zeros(num_features, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(num_features, dtype=np.float32))
        self.register_buffer("running_var", np.ones(num_features, dtype=np.float32))

    _expected_ndim = None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != self._expected_ndim:
            raise ShapeMismatchError(
                f"{type(self).__name__} expects a {self._expected_ndim}-d input, got {x.shape}"
            )
        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
            self.channels_last,
        )


class BatchNorm2d(_BatchNorm):
    _expected_ndim = 4


class BatchNorm1d(_BatchNorm):
    _expected_ndim = 2


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return relu(x)


class MaxPool2d(Module):
    def __init__(
        self, kernel_size: int, stride: int, padding: int = 0, channels_last: bool = False
    ):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.channels_last = channels_last

    def forward(self, x: Tensor) -> Tensor:
        return maxpool2d(x, self.kernel_size, self.stride, self.padding, self.channels_last)
