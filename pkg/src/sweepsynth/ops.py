"""Differentiable network operators: convolution (groups/stride/dilation),
pooling, bilinear resizing, batch normalization, and finite-difference
gradient checking.

Convolutions run as im2col + BLAS matmul.  Forward passes are chunked
over output rows with a fixed budget so large inference resolutions do
not materialize multi-GB column matrices; the chunk size is a pure
function of the shape, keeping results reproducible run to run.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import NonFiniteGradient, ShapeMismatch, Tensor, _result, no_grad

# column-matrix budget (elements) for forward chunking
_COLS_BUDGET = 1 << 26


def _out_size(size, k, stride, dilation, pad):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


class Conv2d:
    """Convolution parameters: weight (out, in/groups, k, k) plus options.

    in/out channels must be divisible by ``groups``; stride and dilation
    must be >= 1.  Weights are Kaiming-uniform (fan-in), biases zero.
    """

    def __init__(
        self,
        in_channels,
        out_channels,
        kernel,
        stride=1,
        padding=0,
        dilation=1,
        groups=1,
        bias=True,
        rng=None,
        dtype=np.float32,
    ):
        if in_channels % groups or out_channels % groups:
            raise ValueError(
                f"channels ({in_channels}, {out_channels}) not divisible by groups={groups}"
            )
        if stride < 1 or dilation < 1:
            raise ValueError(f"stride={stride} and dilation={dilation} must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups
        fan_in = (in_channels // groups) * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)
        if rng is None:
            rng = np.random.default_rng(0)
        w = rng.uniform(-bound, bound, (out_channels, in_channels // groups, kernel, kernel))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return conv2d(x, self)

    def named_params(self, prefix):
        yield prefix + ".weight", self.weight
        if self.bias is not None:
            yield prefix + ".bias", self.bias

    def cast(self, dtype):
        self.weight.data = self.weight.data.astype(dtype)
        if self.bias is not None:
            self.bias.data = self.bias.data.astype(dtype)


def conv2d(x, p):
    """Cross-correlation of ``x`` (n, c, h, w) with ConvParams ``p``."""
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeMismatch(f"conv2d: input has {c} channels, weight expects {p.in_channels}")
    k, stride, pad, dil, g = p.kernel, p.stride, p.padding, p.dilation, p.groups
    oh = _out_size(h, k, stride, dil, pad)
    ow = _out_size(w, k, stride, dil, pad)
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"conv2d: spatial dims {h}x{w} too small for k={k} pad={pad} dil={dil}")
    if k == 1 and stride == 1 and pad == 0 and dil == 1:
        return _conv1x1(x, p)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wmat = p.weight.data.reshape(g, p.out_channels // g, -1)

    out = np.empty((n, p.out_channels, oh, ow), dtype=x.dtype)
    for y0, y1, xs in _row_chunks(xp, k, stride, dil, oh, ow, n):
        cols = kernels.im2col(xs, k, stride, dil, y1 - y0, ow)
        res = _matmul_scratch(wmat, cols.reshape(g, -1, cols.shape[1]), "gemm_fwd", x.dtype)
        res = res.reshape(p.out_channels, n, (y1 - y0) * ow)
        out[:, :, y0:y1] = res.transpose(1, 0, 2).reshape(n, p.out_channels, y1 - y0, ow)
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]

    parents = [t for t in (x, p.weight, p.bias) if t is not None]

    def bwd(gout, x=x, p=p, xp=xp, oh=oh, ow=ow):
        n = x.shape[0]
        k, stride, pad, dil, g = p.kernel, p.stride, p.padding, p.dilation, p.groups
        gflat = np.ascontiguousarray(gout.transpose(1, 0, 2, 3).reshape(p.out_channels, -1))
        if p.bias is not None and p.bias.requires_grad:
            p.bias.accumulate_grad(gflat.sum(axis=1))
        gg = gflat.reshape(g, p.out_channels // g, -1)
        if p.weight.requires_grad:
            cols = kernels.im2col(xp, k, stride, dil, oh, ow)
            colsg = cols.reshape(g, -1, cols.shape[1])
            gw = np.matmul(gg, colsg.transpose(0, 2, 1))
            p.weight.accumulate_grad(gw.reshape(p.weight.shape))
        if x.requires_grad:
            wmat = p.weight.data.reshape(g, p.out_channels // g, -1)
            ckk = p.in_channels // g * k * k
            colgrad = _matmul_scratch(wmat.transpose(0, 2, 1), gg, "colgrad", x.dtype)
            colgrad = colgrad.reshape(g * ckk, -1)
            gxp = kernels.col2im(
                colgrad, n, p.in_channels, xp.shape[2], xp.shape[3], k, stride, dil, oh, ow
            )
            gx = gxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else gxp
            x.accumulate_grad(gx)

    return _result(out, tuple(parents), bwd)


def _matmul_scratch(a, b, tag, dtype):
    if dtype == np.float32:
        out = kernels.scratch(tag, (*a.shape[:-1], b.shape[-1]))
        return np.matmul(a, b, out=out)
    return np.matmul(a, b)


def _conv1x1(x, p):
    """Pointwise convolution as a batched channel matmul (no im2col)."""
    n, c, h, w = x.shape
    g = p.groups
    l = h * w
    wmat = p.weight.data.reshape(g, p.out_channels // g, c // g)
    xg = x.data.reshape(n, g, c // g, l)
    out = np.matmul(wmat, xg).reshape(n, p.out_channels, h, w)
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]

    def bwd(gout, x=x, p=p):
        n, c, h, w = x.shape
        g = p.groups
        l = h * w
        gg = gout.reshape(n, g, p.out_channels // g, l)
        if p.bias is not None and p.bias.requires_grad:
            p.bias.accumulate_grad(gout.sum(axis=(0, 2, 3)))
        if p.weight.requires_grad:
            xg = x.data.reshape(n, g, c // g, l)
            gw = np.matmul(gg, xg.transpose(0, 1, 3, 2)).sum(axis=0)
            p.weight.accumulate_grad(gw.reshape(p.weight.shape))
        if x.requires_grad:
            wt = p.weight.data.reshape(g, p.out_channels // g, c // g).transpose(0, 2, 1)
            x.accumulate_grad(np.matmul(wt, gg).reshape(x.shape))

    parents = [t for t in (x, p.weight, p.bias) if t is not None]
    return _result(out, tuple(parents), bwd)


def _row_chunks(xp, k, stride, dil, oh, ow, n):
    """Yield (y0, y1, padded-input slice) chunks whose im2col matrix stays
    under the fixed element budget."""
    ckk = xp.shape[1] * k * k
    rows = max(1, _COLS_BUDGET // max(1, ckk * n * ow))
    if rows >= oh:
        yield 0, oh, xp
        return
    span = dil * (k - 1) + 1
    for y0 in range(0, oh, rows):
        y1 = min(y0 + rows, oh)
        r0 = y0 * stride
        r1 = (y1 - 1) * stride + span
        yield y0, y1, np.ascontiguousarray(xp[:, :, r0:r1])


def avg_pool2(x):
    """2x2 non-overlapping mean pool; odd dims are edge-replicated first."""
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    oh, ow = xd.shape[2] // 2, xd.shape[3] // 2
    out = xd.reshape(n, c, oh, 2, ow, 2).mean(axis=(3, 5))

    def bwd(g, x=x, ph=ph, pw=pw):
        gq = (0.25 * g)[:, :, :, None, :, None]
        gp = np.broadcast_to(gq, (*g.shape[:2], g.shape[2], 2, g.shape[3], 2))
        gp = gp.reshape(g.shape[0], g.shape[1], 2 * g.shape[2], 2 * g.shape[3])
        h, w = x.shape[2], x.shape[3]
        gx = np.ascontiguousarray(gp[:, :, :h, :w])
        if ph:
            gx[:, :, h - 1] += gp[:, :, h, :w]
        if pw:
            gx[:, :, :, w - 1] += gp[:, :, :h, w]
        if ph and pw:
            gx[:, :, h - 1, w - 1] += gp[:, :, h, w]
        x.accumulate_grad(gx)

    return _result(out, (x,), bwd)


_RESIZE_CACHE = {}


def _resize_matrix(n_in, n_out, dtype):
    """Row-interpolation matrix for align-corners=false bilinear resizing."""
    key = (n_in, n_out, np.dtype(dtype).str)
    m = _RESIZE_CACHE.get(key)
    if m is not None:
        return m
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = min(int(src), max(n_in - 2, 0))
        f = src - i0
        m[i, i0] += 1.0 - f
        if n_in > 1:
            m[i, i0 + 1] += f
    _RESIZE_CACHE[key] = m
    return m


def bilinear_resize(x, out_h, out_w):
    """Separable align-corners=false bilinear resize, differentiable."""
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"bilinear_resize: bad output size {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return _result(x.data.copy(), (x,), lambda g, x=x: x.accumulate_grad(g))
    rh = _resize_matrix(h, out_h, x.dtype)
    rw = _resize_matrix(w, out_w, x.dtype)
    out = np.matmul(rh, np.matmul(x.data, rw.T))

    def bwd(g, x=x, rh=rh, rw=rw):
        x.accumulate_grad(np.matmul(rh.T, np.matmul(g, rw)))

    return _result(out, (x,), bwd)


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes with (biased) batch moments and updates the
    running estimates; eval mode uses the running estimates.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x, training):
        return batchnorm2d(x, self, training)

    def named_params(self, prefix):
        yield prefix + ".gamma", self.gamma
        yield prefix + ".beta", self.beta

    def named_buffers(self, prefix):
        yield prefix + ".running_mean", self.running_mean
        yield prefix + ".running_var", self.running_var

    def set_buffer(self, name, value):
        if name.endswith("running_mean"):
            self.running_mean = value.astype(self.running_mean.dtype)
        else:
            self.running_var = value.astype(self.running_var.dtype)

    def cast(self, dtype):
        self.gamma.data = self.gamma.data.astype(dtype)
        self.beta.data = self.beta.data.astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)


def batchnorm2d(x, bn, training):
    n, c, h, w = x.shape
    if c != bn.channels:
        raise ShapeMismatch(f"batchnorm2d: {c} channels, state has {bn.channels}")
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = n * h * w
        if m > 1:
            unbiased = var * (m / (m - 1))
        else:
            unbiased = var
        bn.running_mean = ((1 - bn.momentum) * bn.running_mean + bn.momentum * mu).astype(
            bn.running_mean.dtype
        )
        bn.running_var = ((1 - bn.momentum) * bn.running_var + bn.momentum * unbiased).astype(
            bn.running_var.dtype
        )
    else:
        mu = bn.running_mean.astype(x.dtype)
        var = bn.running_var.astype(x.dtype)
    ivar = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x.data - mu[None, :, None, None]) * ivar[None, :, None, None]
    out = bn.gamma.data[None, :, None, None] * xhat + bn.beta.data[None, :, None, None]

    def bwd(g, x=x, bn=bn, xhat=xhat, ivar=ivar, training=training):
        if bn.gamma.requires_grad:
            bn.gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if bn.beta.requires_grad:
            bn.beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gi = bn.gamma.data[None, :, None, None] * ivar[None, :, None, None]
            if training:
                m = g.shape[0] * g.shape[2] * g.shape[3]
                gsum = g.sum(axis=(0, 2, 3), keepdims=True)
                gxsum = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
                x.accumulate_grad(gi * (g - gsum / m - xhat * (gxsum / m)))
            else:
                x.accumulate_grad(gi * g)

    return _result(out, tuple(t for t in (x, bn.gamma, bn.beta) if t is not None), bwd)


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    n_checked: int = 0
    worst: tuple = ()
    failures: list = field(default_factory=list)

    def passed(self, tol):
        return self.max_rel_err < tol and not self.failures


def grad_check(f, inputs, tol=1e-3, h=1e-5, max_per_tensor=24, seed=0):
    """Central finite differences against the tape gradient.

    ``f`` must rebuild the graph and return a scalar Tensor from the
    float64 ``inputs``.  A deterministic sample of coordinates in each
    input is perturbed; the report carries the max relative error.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 tensors")
        t.zero_grad()
    out = f()
    if out.size != 1:
        raise ValueError("grad_check target must be scalar")
    out.backward()
    grads = []
    for t in inputs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("tape gradient contains NaN/Inf")
        grads.append(g.copy())
        t.zero_grad()

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for ti, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        count = min(max_per_tensor, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                f1 = f().item()
            flat[c] = orig - h
            with no_grad():
                f2 = f().item()
            flat[c] = orig
            num = (f1 - f2) / (2 * h)
            ana = grads[ti].reshape(-1)[c]
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
            report.n_checked += 1
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = (ti, int(c), float(ana), float(num))
            if rel > tol:
                report.failures.append((ti, int(c), float(ana), float(num), float(rel)))
    return report
