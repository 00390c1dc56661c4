"""Differentiable numeric operations.

Every op computes eagerly with numpy and records a pullback on the tape of
any attached ``Var`` operand (mixing operands from two tapes is an error).
With no attached operand the same functions run as plain array functions,
which is the fast path used for inference and benchmarks.

Conventions:
  - feature maps are (n, c, h, w) row-major float32 ("Tensor4" layout);
    token matrices are (N, d);
  - conv2d is cross-correlation (no kernel flip), the deep-learning default;
  - gelu uses the tanh approximation
    0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)));
  - bilinear upsampling uses the align-corners=false convention;
  - space_to_depth2 stacks the 2x2 phases phase-major in the order
    top-left, top-right, bottom-left, bottom-right.

Ops assert all outputs finite; the check can be toggled globally (it is
disabled inside timing benchmarks).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Var
from .errors import NumericError, ShapeError

SQRT_2_OVER_PI = 0.7978845608028654  # sqrt(2/pi), gelu tanh approximation
GELU_CUBIC_COEF = 0.044715

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the NaN/Inf assertion on op outputs; returns previous state."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


def _check(value: np.ndarray, op: str):
    if _FINITE_CHECKS and not np.all(np.isfinite(value)):
        raise NumericError(f"{op}: non-finite value in output")
    return value


def _val(x):
    return x.value if isinstance(x, Var) else x


def _attached(x):
    return isinstance(x, Var) and x.node is not None


def _dispatch(out, operands, pull):
    """Record ``out`` if any operand is attached; else return it as-is.

    ``pull(grad)`` must return one gradient per operand, in order; entries
    for non-Var operands are ignored.
    """
    tape = None
    for v in operands:
        if _attached(v):
            if tape is None:
                tape = v.tape
            elif v.tape is not tape:
                raise ShapeError("operands recorded on different tapes")
    if tape is None:
        return out
    idxs = [i for i, v in enumerate(operands) if _attached(v)]
    parents = tuple(operands[i].node for i in idxs)

    def pullback(g):
        grads = pull(g)
        return [grads[i] for i in idxs]

    return tape.record(out, parents, pullback)


def _dtype_of(*operands):
    for v in operands:
        if _attached(v):
            return v.tape.dtype
    for v in operands:
        a = _val(v)
        if isinstance(a, np.ndarray):
            return a.dtype
    return np.dtype(np.float32)


def _cast(x, dtype):
    a = _val(x)
    return np.asarray(a, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise


def _binary(a, b, op):
    dt = _dtype_of(a, b)
    av, bv = _cast(a, dt), _cast(b, dt)
    if av.shape != bv.shape:
        raise ShapeError(f"{op}: shape mismatch {av.shape} vs {bv.shape}")
    return av, bv


def add(a, b):
    av, bv = _binary(a, b, "add")
    out = _check(av + bv, "add")
    return _dispatch(out, (a, b), lambda g: (g, g))


def sub(a, b):
    av, bv = _binary(a, b, "sub")
    out = _check(av - bv, "sub")
    return _dispatch(out, (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = _binary(a, b, "mul")
    out = _check(av * bv, "mul")
    return _dispatch(out, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    av, bv = _binary(a, b, "div")
    out = _check(av / bv, "div")
    return _dispatch(out, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def scale(x, a: float, shift: float = 0.0):
    """a*x + shift with python-float coefficients."""
    xv = _val(x)
    dt = _dtype_of(x)
    out = _check(xv * dt.type(a) + dt.type(shift), "scale")
    return _dispatch(out, (x,), lambda g: (g * dt.type(a),))


def relu(x):
    xv = _val(x)
    out = np.maximum(xv, 0)
    return _dispatch(out, (x,), lambda g: (g * (xv > 0),))


def gelu(x):
    xv = _val(x)
    dt = xv.dtype.type
    c0, c1 = dt(SQRT_2_OVER_PI), dt(GELU_CUBIC_COEF)
    inner = c0 * (xv + c1 * xv**3)
    t = np.tanh(inner)
    out = _check(dt(0.5) * xv * (1 + t), "gelu")

    def pull(g):
        dinner = c0 * (1 + 3 * c1 * xv * xv)
        dx = dt(0.5) * (1 + t) + dt(0.5) * xv * (1 - t * t) * dinner
        return (g * dx,)

    return _dispatch(out, (x,), pull)


def exp(x):
    xv = _val(x)
    out = _check(np.exp(xv), "exp")
    return _dispatch(out, (x,), lambda g: (g * out,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    dt = _dtype_of(a, b)
    av, bv = _cast(a, dt), _cast(b, dt)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(
            f"matmul: inner dims differ, a axis 1 = {av.shape[1]} vs b axis 0 = {bv.shape[0]}"
        )
    out = _check(av @ bv, "matmul")
    return _dispatch(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(x):
    xv = _val(x)
    if xv.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d operand, got {xv.shape}")
    return _dispatch(np.ascontiguousarray(xv.T), (x,), lambda g: (g.T,))


def linear(x, w, b):
    """x @ w + b for token matrices; b broadcasts over rows."""
    dt = _dtype_of(x, w, b)
    xv, wv, bv = _cast(x, dt), _cast(w, dt), _cast(b, dt)
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(
            f"linear: x {xv.shape} incompatible with w {wv.shape} (features = axis 1)"
        )
    if bv.shape != (wv.shape[1],):
        raise ShapeError(f"linear: bias shape {bv.shape}, expected ({wv.shape[1]},)")
    out = _check(xv @ wv + bv, "linear")
    return _dispatch(out, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def reshape(x, shape):
    xv = _val(x)
    out = xv.reshape(shape)
    orig = xv.shape
    return _dispatch(out, (x,), lambda g: (g.reshape(orig),))


# ---------------------------------------------------------------------------
# reductions and broadcasts


def sum_all(x):
    xv = _val(x)
    out = np.asarray(xv.sum(), dtype=xv.dtype)
    shp = xv.shape
    return _dispatch(out, (x,), lambda g: (np.broadcast_to(g, shp),))


def sum_axis(x, axis: int):
    xv = _val(x)
    out = xv.sum(axis=axis)
    return _dispatch(
        out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), xv.shape),)
    )


def mean_all(x):
    xv = _val(x)
    return scale(sum_all(x), 1.0 / xv.size)


def expand_cols(v, ncols: int):
    """(N,) -> (N, ncols) by repetition; adjoint sums over columns."""
    vv = _val(v)
    if vv.ndim != 1:
        raise ShapeError(f"expand_cols: expected 1-d operand, got {vv.shape}")
    out = np.broadcast_to(vv[:, None], (vv.shape[0], ncols)).copy()
    return _dispatch(out, (v,), lambda g: (g.sum(axis=1),))


def expand_rows(v, nrows: int):
    """(m,) -> (nrows, m) by repetition; adjoint sums over rows."""
    vv = _val(v)
    if vv.ndim != 1:
        raise ShapeError(f"expand_rows: expected 1-d operand, got {vv.shape}")
    out = np.broadcast_to(vv[None, :], (nrows, vv.shape[0])).copy()
    return _dispatch(out, (v,), lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# softmax family


def softmax_lastdim(x):
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    xv = _val(x)
    z = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = _check(e / e.sum(axis=-1, keepdims=True), "softmax_lastdim")

    def pull(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) * out,)

    return _dispatch(out, (x,), pull)


def log_softmax_lastdim(x):
    xv = _val(x)
    z = xv - xv.max(axis=-1, keepdims=True)
    out = _check(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)), "log_softmax_lastdim")

    def pull(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _dispatch(out, (x,), pull)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Per-token normalization over the feature axis of an (N, d) matrix."""
    if eps <= 0:
        raise ShapeError(f"layer_norm: eps must be positive, got {eps}")
    dt = _dtype_of(x, gamma, beta)
    xv, gv, bv = _cast(x, dt), _cast(gamma, dt), _cast(beta, dt)
    if xv.ndim != 2:
        raise ShapeError(f"layer_norm: expected (N, d) tokens, got {xv.shape}")
    if gv.shape != (xv.shape[1],) or bv.shape != (xv.shape[1],):
        raise ShapeError(
            f"layer_norm: gamma/beta must be ({xv.shape[1]},), got {gv.shape}/{bv.shape}"
        )
    mu = xv.mean(axis=1, keepdims=True)
    var = xv.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = (xv - mu) * inv
    out = _check(xhat * gv + bv, "layer_norm")

    def pull(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return (dx, dgamma, dbeta)

    return _dispatch(out, (x, gamma, beta), pull)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Channel-wise batch normalization on (n, c, h, w).

    Training mode normalizes by batch statistics and updates the running
    buffers in place (unbiased variance, torch-style momentum blend);
    inference mode normalizes by the running buffers.
    """
    if eps <= 0:
        raise ShapeError(f"batch_norm: eps must be positive, got {eps}")
    dt = _dtype_of(x, gamma, beta)
    xv, gv, bv = _cast(x, dt), _cast(gamma, dt), _cast(beta, dt)
    if xv.ndim != 4:
        raise ShapeError(f"batch_norm: expected (n, c, h, w), got {xv.shape}")
    c = xv.shape[1]
    for name, arr in (("gamma", gv), ("beta", bv), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {arr.shape}, expected ({c},) to match channel axis 1")

    if training:
        m = xv.shape[0] * xv.shape[2] * xv.shape[3]
        mu = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mu = running_mean.astype(dt)
        var = running_var.astype(dt)

    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = (xv - mu[None, :, None, None]) * inv[None, :, None, None]
    out = _check(xhat * gv[None, :, None, None] + bv[None, :, None, None], "batch_norm")

    def pull(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gv[None, :, None, None]
        if training:
            dx = inv[None, :, None, None] * (
                dxhat
                - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv[None, :, None, None]
        return (dx, dgamma, dbeta)

    return _dispatch(out, (x, gamma, beta), pull)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b, stride: int = 1, dilation: int = 1, padding: int = 0):
    """2-d cross-correlation with square odd kernels.

    x: (n, c_in, h, w); w: (c_out, c_in, k, k); b: (c_out,).
    Output spatial size: floor((h + 2p - d*(k-1) - 1)/stride) + 1.
    """
    dt = _dtype_of(x, w, b)
    xv, wv, bv = _cast(x, dt), _cast(w, dt), _cast(b, dt)
    if xv.ndim != 4:
        raise ShapeError(f"conv2d: expected (n, c, h, w) input, got {xv.shape}")
    if wv.ndim != 4 or wv.shape[2] != wv.shape[3]:
        raise ShapeError(f"conv2d: expected square (c_out, c_in, k, k) weight, got {wv.shape}")
    n, c_in, h, w_in = xv.shape
    c_out, wc_in, k, _ = wv.shape
    if wc_in != c_in:
        raise ShapeError(
            f"conv2d: input channels (axis 1) = {c_in} but weight expects c_in = {wc_in}"
        )
    if k % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if dilation < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad dilation {dilation} or padding {padding}")
    if bv.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bv.shape}, expected ({c_out},)")

    span = dilation * (k - 1) + 1
    oh = (h + 2 * padding - span) // stride + 1
    ow = (w_in + 2 * padding - span) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d: non-positive output size ({oh}, {ow}) for input {xv.shape}, "
            f"k={k} stride={stride} dilation={dilation} padding={padding}"
        )

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # accumulate as (c_out, n, oh, ow): one GEMM per kernel tap
    acc = np.zeros((c_out, n, oh, ow), dtype=dt)
    for ky in range(k):
        y0 = ky * dilation
        for kx in range(k):
            x0 = kx * dilation
            view = xp[:, :, y0 : y0 + (oh - 1) * stride + 1 : stride,
                      x0 : x0 + (ow - 1) * stride + 1 : stride]
            acc += np.tensordot(wv[:, :, ky, kx], view, axes=([1], [1]))
    out = acc.transpose(1, 0, 2, 3) + bv[None, :, None, None]
    out = _check(np.ascontiguousarray(out), "conv2d")

    need_dx, need_dw = _attached(x), _attached(w)

    def pull(g):
        db = g.sum(axis=(0, 2, 3)) if _attached(b) else None
        dw = np.zeros_like(wv) if need_dw else None
        dxp = np.zeros_like(xp) if need_dx else None
        for ky in range(k):
            y0 = ky * dilation
            ysl = slice(y0, y0 + (oh - 1) * stride + 1, stride)
            for kx in range(k):
                x0 = kx * dilation
                xsl = slice(x0, x0 + (ow - 1) * stride + 1, stride)
                if need_dw:
                    view = xp[:, :, ysl, xsl]
                    dw[:, :, ky, kx] = np.tensordot(g, view, axes=([0, 2, 3], [0, 2, 3]))
                if need_dx:
                    contrib = np.tensordot(wv[:, :, ky, kx], g, axes=([0], [1]))
                    dxp[:, :, ysl, xsl] += contrib.transpose(1, 0, 2, 3)
        dx = None
        if need_dx:
            dx = dxp[:, :, padding : padding + h, padding : padding + w_in]
        return (dx, dw, db)

    return _dispatch(out, (x, w, b), pull)


# ---------------------------------------------------------------------------
# resampling and layout


def _lerp_weights(n_in: int):
    """Source indices and weights for 2x bilinear, align-corners=false."""
    dst = np.arange(2 * n_in)
    src = (dst + 0.5) / 2.0 - 0.5
    i0f = np.floor(src)
    w1 = src - i0f
    i0 = np.clip(i0f, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.int64)
    return i0, i1, w1


def bilinear_upsample2x(x):
    """(n, c, h, w) -> (n, c, 2h, 2w), align-corners=false."""
    xv = _val(x)
    if xv.ndim != 4:
        raise ShapeError(f"bilinear_upsample2x: expected (n, c, h, w), got {xv.shape}")
    n, c, h, w = xv.shape
    dt = xv.dtype
    r0, r1, wr = _lerp_weights(h)
    c0, c1, wc = _lerp_weights(w)
    wr = wr.astype(dt)
    wc = wc.astype(dt)
    tmp = xv[:, :, r0, :] * (1 - wr)[None, None, :, None] + xv[:, :, r1, :] * wr[None, None, :, None]
    out = tmp[:, :, :, c0] * (1 - wc) + tmp[:, :, :, c1] * wc
    out = _check(out, "bilinear_upsample2x")

    def pull(g):
        dtmp = np.zeros((n, c, 2 * h, w), dtype=g.dtype)
        np.add.at(dtmp, (Ellipsis, c0), g * (1 - wc))
        np.add.at(dtmp, (Ellipsis, c1), g * wc)
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(dx, (slice(None), slice(None), r0), dtmp * (1 - wr)[None, None, :, None])
        np.add.at(dx, (slice(None), slice(None), r1), dtmp * wr[None, None, :, None])
        return (dx,)

    return _dispatch(out, (x,), pull)


def space_to_depth2(x):
    """(n, c, h, w) -> (n, 4c, h/2, w/2); phases ordered TL, TR, BL, BR."""
    xv = _val(x)
    if xv.ndim != 4:
        raise ShapeError(f"space_to_depth2: expected (n, c, h, w), got {xv.shape}")
    n, c, h, w = xv.shape
    if h % 2 != 0 or w % 2 != 0:
        raise ShapeError(f"space_to_depth2: spatial dims must be even, got h={h}, w={w}")
    out = (
        xv.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 3, 5, 1, 2, 4)
        .reshape(n, 4 * c, h // 2, w // 2)
    )
    out = np.ascontiguousarray(out)
    return _dispatch(out, (x,), lambda g: (_d2s_value(g),))


def _d2s_value(xv):
    n, c4, h2, w2 = xv.shape
    c = c4 // 4
    return np.ascontiguousarray(
        xv.reshape(n, 2, 2, c, h2, w2).transpose(0, 3, 4, 1, 5, 2).reshape(n, c, 2 * h2, 2 * w2)
    )


def depth_to_space2(x):
    """Exact inverse of space_to_depth2."""
    xv = _val(x)
    if xv.ndim != 4 or xv.shape[1] % 4 != 0:
        raise ShapeError(f"depth_to_space2: expected (n, 4c, h, w), got {xv.shape}")
    out = _d2s_value(xv)

    def pull(g):
        n, c, h, w = g.shape
        return (
            np.ascontiguousarray(
                g.reshape(n, c, h // 2, 2, w // 2, 2)
                .transpose(0, 3, 5, 1, 2, 4)
                .reshape(n, 4 * c, h // 2, w // 2)
            ),
        )

    return _dispatch(out, (x,), pull)


def to_tokens(x):
    """(n, c, h, w) -> (n*h*w, c); positions vary fastest within one image."""
    xv = _val(x)
    if xv.ndim != 4:
        raise ShapeError(f"to_tokens: expected (n, c, h, w), got {xv.shape}")
    n, c, h, w = xv.shape
    out = np.ascontiguousarray(xv.transpose(0, 2, 3, 1).reshape(n * h * w, c))
    return _dispatch(out, (x,), lambda g: (np.ascontiguousarray(g.reshape(n, h, w, c).transpose(0, 3, 1, 2)),))


def from_tokens(t, shape4):
    """(n*h*w, c) -> (n, c, h, w); exact inverse of to_tokens."""
    tv = _val(t)
    n, c, h, w = shape4
    if tv.ndim != 2 or tv.shape != (n * h * w, c):
        raise ShapeError(f"from_tokens: tokens {tv.shape} do not match target {shape4}")
    out = np.ascontiguousarray(tv.reshape(n, h, w, c).transpose(0, 3, 1, 2))
    return _dispatch(out, (t,), lambda g: (np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(n * h * w, c)),))


# ---------------------------------------------------------------------------
# concatenation / slicing


def concat(parts, axis: int):
    vals = [_val(p) for p in parts]
    out = _check(np.concatenate(vals, axis=axis), "concat")
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def pull(g):
        return [
            g[tuple(slice(offsets[i], offsets[i + 1]) if ax == axis else slice(None)
                    for ax in range(g.ndim))]
            for i in range(len(vals))
        ]

    return _dispatch(out, tuple(parts), pull)


def slice_axis(x, start: int, stop: int, axis: int):
    xv = _val(x)
    idx = tuple(slice(start, stop) if ax == axis else slice(None) for ax in range(xv.ndim))
    out = np.ascontiguousarray(xv[idx])

    def pull(g):
        dx = np.zeros_like(xv)
        dx[idx] = g
        return (dx,)

    return _dispatch(out, (x,), pull)


def split(x, sizes, axis: int):
    xv = _val(x)
    if sum(sizes) != xv.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not cover axis {axis} of {xv.shape}")
    pieces = []
    off = 0
    for s in sizes:
        pieces.append(slice_axis(x, off, off + s, axis))
        off += s
    return pieces
