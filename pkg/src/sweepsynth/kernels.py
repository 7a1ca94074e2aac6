"""Native kernel dispatch with pure-numpy fallbacks.

The compiled extension covers the float32 hot paths (homography warp
sampling, im2col/col2im).  The numpy fallbacks implement identical
semantics and also serve the float64 mode used by gradient checks.
"""

import numpy as np

try:
    from . import _kernels

    HAVE_NATIVE = True
except ImportError:  # pragma: no cover - build without compiler
    _kernels = None
    HAVE_NATIVE = False


def warp_bilinear_rgb(img, hm, out_h, out_w):
    """Sample ``img`` (H, W, 3) under homography ``hm`` mapping output
    pixels to source pixels.  Returns (warped (out_h, out_w, 3) float32,
    valid (out_h, out_w) float32 in {0, 1}).
    """
    img = np.ascontiguousarray(img, dtype=np.float32)
    hm = np.ascontiguousarray(hm, dtype=np.float64).reshape(9)
    out = np.empty((out_h, out_w, 3), dtype=np.float32)
    valid = np.empty((out_h, out_w), dtype=np.float32)
    if HAVE_NATIVE:
        _kernels.warp_bilinear_rgb(
            img, img.shape[0], img.shape[1], hm, out, valid, out_h, out_w
        )
        return out, valid
    return _warp_bilinear_numpy(img, hm.reshape(3, 3), out, valid)


_COORD_EPS = 1e-6


def _warp_bilinear_numpy(img, hm, out, valid):
    ih, iw = img.shape[:2]
    oh, ow = valid.shape
    xs = np.arange(ow, dtype=np.float64)
    ys = np.arange(oh, dtype=np.float64)
    X, Y = np.meshgrid(xs, ys)
    den = hm[2, 0] * X + hm[2, 1] * Y + hm[2, 2]
    den = np.where(np.abs(den) < 1e-12, np.nan, den)
    u = (hm[0, 0] * X + hm[0, 1] * Y + hm[0, 2]) / den
    v = (hm[1, 0] * X + hm[1, 1] * Y + hm[1, 2]) / den
    eps = _COORD_EPS
    with np.errstate(invalid="ignore"):
        valid[:] = (
            (u >= -eps) & (u <= iw - 1 + eps) & (v >= -eps) & (v <= ih - 1 + eps)
        ).astype(np.float32)
    u = np.nan_to_num(np.clip(u, 0.0, iw - 1))
    v = np.nan_to_num(np.clip(v, 0.0, ih - 1))
    x0 = np.minimum(u.astype(np.int64), max(iw - 2, 0))
    y0 = np.minimum(v.astype(np.int64), max(ih - 2, 0))
    fx = (u - x0).astype(np.float32)[..., None]
    fy = (v - y0).astype(np.float32)[..., None]
    fx = np.where(fx < eps, 0.0, np.where(fx > 1 - eps, 1.0, fx)).astype(np.float32)
    fy = np.where(fy < eps, 0.0, np.where(fy > 1 - eps, 1.0, fy)).astype(np.float32)
    x1 = np.minimum(x0 + 1, iw - 1)
    y1 = np.minimum(y0 + 1, ih - 1)
    c00 = img[y0, x0]
    c01 = img[y0, x1]
    c10 = img[y1, x0]
    c11 = img[y1, x1]
    top = (1 - fx) * c00 + fx * c01
    bot = (1 - fx) * c10 + fx * c11
    out[:] = ((1 - fy) * top + fy * bot) * valid[..., None]
    return out, valid


def warp_bilinear_rgb_planar(img, hm, out, valid):
    """As warp_bilinear_rgb but writing channel-planar results into the
    caller-provided ``out`` (3, H, W) and ``valid`` (H, W) float32
    buffers (both contiguous)."""
    oh, ow = valid.shape
    hm = np.ascontiguousarray(hm, dtype=np.float64).reshape(9)
    if HAVE_NATIVE:
        img = np.ascontiguousarray(img, dtype=np.float32)
        _kernels.warp_bilinear_rgb_planar(
            img, img.shape[0], img.shape[1], hm, out, valid, oh, ow
        )
        return out, valid
    tmp = np.empty((oh, ow, 3), dtype=np.float32)
    _warp_bilinear_numpy(img, hm.reshape(3, 3), tmp, valid)
    out[:] = tmp.transpose(2, 0, 1)
    return out, valid


def _out_size(size, k, stride, dilation, pad):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


_SCRATCH = {}


def scratch(tag, shape, dtype=np.float32):
    """Reusable uninitialized buffer; large transient matrices go through
    here so repeated calls do not page-fault fresh allocations."""
    key = (tag, np.dtype(dtype).str)
    need = int(np.prod(shape))
    buf = _SCRATCH.get(key)
    if buf is None or buf.size < need:
        buf = np.empty(need, dtype=dtype)
        _SCRATCH[key] = buf
    return buf[:need].reshape(shape)


def im2col(xp, k, stride, dilation, oh, ow, tag="cols"):
    """Unfold padded input ``xp`` (n, c, hp, wp) into a (c*k*k, n*oh*ow)
    matrix; column order is (sample, row, col).  The result is a view of
    a pooled scratch buffer and is only valid until the next call with
    the same tag."""
    n, c, hp, wp = xp.shape
    if HAVE_NATIVE and xp.dtype == np.float32:
        xp = np.ascontiguousarray(xp)
        cols = scratch(tag, (c * k * k, n * oh * ow))
        _kernels.im2col(xp, n, c, hp, wp, k, stride, dilation, oh, ow, cols)
        return cols
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (c, k, k, n, oh, ow),
        (s[1], s[2] * dilation, s[3] * dilation, s[0], s[2] * stride, s[3] * stride),
    )
    return view.reshape(c * k * k, n * oh * ow).copy()


def col2im(cols, n, c, hp, wp, k, stride, dilation, oh, ow):
    """Scatter-add the transpose of im2col; returns the padded gradient
    (a pooled buffer, valid until the next col2im call)."""
    if HAVE_NATIVE and cols.dtype == np.float32:
        xp = scratch("col2im", (n, c, hp, wp))
        xp[:] = 0.0
        cols = np.ascontiguousarray(cols)
        _kernels.col2im(cols, n, c, hp, wp, k, stride, dilation, oh, ow, xp)
        return xp
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    g = cols.reshape(c, k, k, n, oh, ow)
    for i in range(k):
        for j in range(k):
            ys = slice(i * dilation, i * dilation + oh * stride, stride)
            xs = slice(j * dilation, j * dilation + ow * stride, stride)
            xp[:, :, ys, xs] += g[:, i, j].transpose(1, 0, 2, 3)
    return xp
