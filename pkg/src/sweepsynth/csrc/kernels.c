/* Hot loops behind sweepsynth: homography warp sampling and the
 * im2col/col2im shuffles used by the convolution engine.
 *
 * All buffers are passed via the Python buffer protocol as contiguous
 * arrays; the Python wrappers in kernels.py validate dtype/shape and
 * provide pure-numpy fallbacks when this module is unavailable.
 */

#define PY_SSIZE_T_CLEAN
#include <Python.h>

#include <math.h>
#include <stdlib.h>
#include <string.h>

/* Bilinear sampling of an RGB image under a 3x3 homography.
 *
 * For each output pixel p=(x,y,1), source coords are the perspective
 * division of Hm @ p (double precision).  A pixel is valid iff the
 * source point lies in [0, W-1] x [0, H-1] (with 1e-6 px slack so that
 * numerically-identity homographies keep their border row); sampling at
 * the exact border clamps the base index so the edge texel is returned
 * with full weight.  Fractions within 1e-6 of an integer snap to it,
 * making integer-coordinate sampling bit-exact.  Invalid pixels are
 * zeroed.
 */
#define COORD_EPS 1e-6

/* Row-sliced implementation shared by both output layouts: coordinates
 * in double (pass 1, vectorizable), weights/indices in float (pass 2),
 * then the scalar gather/blend (pass 3).
 */
typedef struct {
    float *fx;
    float *fy;
    float *ok;
    int *b0;
} row_bufs;

static int
row_bufs_init(row_bufs *rb, long ow)
{
    rb->fx = malloc((size_t)ow * sizeof(float));
    rb->fy = malloc((size_t)ow * sizeof(float));
    rb->ok = malloc((size_t)ow * sizeof(float));
    rb->b0 = malloc((size_t)ow * sizeof(int));
    if (!rb->fx || !rb->fy || !rb->ok || !rb->b0)
        return 0;
    return 1;
}

static void
row_bufs_free(row_bufs *rb)
{
    free(rb->fx);
    free(rb->fy);
    free(rb->ok);
    free(rb->b0);
}

static void
warp_row_coords(const double *restrict hm, long y, long ow, long ih, long iw,
                row_bufs *rb)
{
    const double h00 = hm[0], h01 = hm[1], h02 = hm[2];
    const double h10 = hm[3], h11 = hm[4], h12 = hm[5];
    const double h20 = hm[6], h21 = hm[7], h22 = hm[8];
    const double un = h01 * y + h02;
    const double vn = h11 * y + h12;
    const double dn = h21 * y + h22;
    const double umax = (double)(iw - 1), vmax = (double)(ih - 1);
    float *restrict fxb = rb->fx;
    float *restrict fyb = rb->fy;
    float *restrict okb = rb->ok;
    int *restrict b0b = rb->b0;
    const long rowstride = iw * 3;
    long x;

    for (x = 0; x < ow; x++) {
        const double d0 = dn + h20 * x;
        /* keep the quotient finite so -ffast-math never sees inf */
        const double d = fabs(d0) < 1e-12 ? 1e-12 : d0;
        const double r = 1.0 / d;
        const double u = (un + h00 * x) * r;
        const double v = (vn + h10 * x) * r;
        okb[x] = (u >= -COORD_EPS) & (u <= umax + COORD_EPS) &
                         (v >= -COORD_EPS) & (v <= vmax + COORD_EPS)
                     ? 1.0f
                     : 0.0f;
        const double uc = u < 0.0 ? 0.0 : (u > umax ? umax : u);
        const double vc = v < 0.0 ? 0.0 : (v > vmax ? vmax : v);
        int x0 = (int)uc;
        int y0 = (int)vc;
        x0 = (iw > 1 && x0 > iw - 2) ? (int)(iw - 2) : x0;
        y0 = (ih > 1 && y0 > ih - 2) ? (int)(ih - 2) : y0;
        float fx = (float)(uc - (double)x0);
        float fy = (float)(vc - (double)y0);
        fx = fx < (float)COORD_EPS ? 0.0f : (fx > 1.0f - (float)COORD_EPS ? 1.0f : fx);
        fy = fy < (float)COORD_EPS ? 0.0f : (fy > 1.0f - (float)COORD_EPS ? 1.0f : fy);
        fxb[x] = fx;
        fyb[x] = fy;
        b0b[x] = y0 * (int)rowstride + x0 * 3;
    }
}

static void
warp_bilinear_rgb(const float *restrict img, long ih, long iw,
                  const double *restrict hm, float *restrict out,
                  float *restrict valid, long oh, long ow)
{
    const long rowstride = iw * 3;
    const long dx = (iw > 1) ? 3 : 0;
    const long dyr = (ih > 1) ? rowstride : 0;
    row_bufs rb;
    long x, y;

    if (!row_bufs_init(&rb, ow)) {
        row_bufs_free(&rb);
        return;
    }
    for (y = 0; y < oh; y++) {
        float *restrict orow = out + (size_t)y * ow * 3;
        float *restrict vrow = valid + (size_t)y * ow;
        warp_row_coords(hm, y, ow, ih, iw, &rb);
        for (x = 0; x < ow; x++) {
            const long b0 = rb.b0[x];
            const long b1 = b0 + dyr;
            const float fx = rb.fx[x], fy = rb.fy[x], okf = rb.ok[x];
            const float gx = 1.0f - fx, gy = 1.0f - fy;
            const float t0 = gx * img[b0] + fx * img[b0 + dx];
            const float t1 = gx * img[b0 + 1] + fx * img[b0 + dx + 1];
            const float t2 = gx * img[b0 + 2] + fx * img[b0 + dx + 2];
            const float s0 = gx * img[b1] + fx * img[b1 + dx];
            const float s1 = gx * img[b1 + 1] + fx * img[b1 + dx + 1];
            const float s2 = gx * img[b1 + 2] + fx * img[b1 + dx + 2];
            orow[x * 3] = okf * (gy * t0 + fy * s0);
            orow[x * 3 + 1] = okf * (gy * t1 + fy * s1);
            orow[x * 3 + 2] = okf * (gy * t2 + fy * s2);
            vrow[x] = okf;
        }
    }
    row_bufs_free(&rb);
}

/* Same sampling, but writing channel-planar output (3, oh, ow) so a
 * plane-sweep slice can be filled in place without a transpose pass. */
static void
warp_bilinear_rgb_planar(const float *restrict img, long ih, long iw,
                         const double *restrict hm, float *restrict out,
                         float *restrict valid, long oh, long ow)
{
    const long rowstride = iw * 3;
    const long dx = (iw > 1) ? 3 : 0;
    const long dyr = (ih > 1) ? rowstride : 0;
    const size_t plane = (size_t)oh * ow;
    row_bufs rb;
    long x, y;

    if (!row_bufs_init(&rb, ow)) {
        row_bufs_free(&rb);
        return;
    }
    for (y = 0; y < oh; y++) {
        float *restrict o0 = out + (size_t)y * ow;
        float *restrict o1 = o0 + plane;
        float *restrict o2 = o1 + plane;
        float *restrict vrow = valid + (size_t)y * ow;
        warp_row_coords(hm, y, ow, ih, iw, &rb);
        for (x = 0; x < ow; x++) {
            const long b0 = rb.b0[x];
            const long b1 = b0 + dyr;
            const float fx = rb.fx[x], fy = rb.fy[x], okf = rb.ok[x];
            const float gx = 1.0f - fx, gy = 1.0f - fy;
            const float t0 = gx * img[b0] + fx * img[b0 + dx];
            const float t1 = gx * img[b0 + 1] + fx * img[b0 + dx + 1];
            const float t2 = gx * img[b0 + 2] + fx * img[b0 + dx + 2];
            const float s0 = gx * img[b1] + fx * img[b1 + dx];
            const float s1 = gx * img[b1 + 1] + fx * img[b1 + dx + 1];
            const float s2 = gx * img[b1 + 2] + fx * img[b1 + dx + 2];
            o0[x] = okf * (gy * t0 + fy * s0);
            o1[x] = okf * (gy * t1 + fy * s1);
            o2[x] = okf * (gy * t2 + fy * s2);
            vrow[x] = okf;
        }
    }
    row_bufs_free(&rb);
}

/* cols layout: row index = c*k*k + i*k + j, column index = (n*oh + y)*ow + x.
 * xp is the already padded input (n, c, hp, wp).
 */
static void
im2col_f32(const float *restrict xp, long n, long c, long hp, long wp, long k,
           long stride, long dil, long oh, long ow, float *restrict cols)
{
    const long ncols = n * oh * ow;
    long ci, i, j, ni, y, x;

    for (ci = 0; ci < c; ci++) {
        for (i = 0; i < k; i++) {
            for (j = 0; j < k; j++) {
                float *crow = cols + ((size_t)(ci * k + i) * k + j) * ncols;
                for (ni = 0; ni < n; ni++) {
                    const float *src = xp + ((size_t)ni * c + ci) * hp * wp;
                    for (y = 0; y < oh; y++) {
                        const float *srow = src + (size_t)(y * stride + i * dil) * wp + j * dil;
                        float *dst = crow + (size_t)(ni * oh + y) * ow;
                        if (stride == 1) {
                            memcpy(dst, srow, (size_t)ow * sizeof(float));
                        } else {
                            for (x = 0; x < ow; x++)
                                dst[x] = srow[x * stride];
                        }
                    }
                }
            }
        }
    }
}

/* Transpose of im2col: scatter-add cols back into the padded gradient. */
static void
col2im_f32(const float *restrict cols, long n, long c, long hp, long wp, long k,
           long stride, long dil, long oh, long ow, float *restrict xp)
{
    const long ncols = n * oh * ow;
    long ci, i, j, ni, y, x;

    for (ci = 0; ci < c; ci++) {
        for (i = 0; i < k; i++) {
            for (j = 0; j < k; j++) {
                const float *crow = cols + ((size_t)(ci * k + i) * k + j) * ncols;
                for (ni = 0; ni < n; ni++) {
                    float *dst = xp + ((size_t)ni * c + ci) * hp * wp;
                    for (y = 0; y < oh; y++) {
                        float *drow = dst + (size_t)(y * stride + i * dil) * wp + j * dil;
                        const float *srow = crow + (size_t)(ni * oh + y) * ow;
                        if (stride == 1) {
                            for (x = 0; x < ow; x++)
                                drow[x] += srow[x];
                        } else {
                            for (x = 0; x < ow; x++)
                                drow[x * stride] += srow[x];
                        }
                    }
                }
            }
        }
    }
}

static int
check_len(Py_buffer *buf, size_t expect, const char *name)
{
    if ((size_t)buf->len != expect) {
        PyErr_Format(PyExc_ValueError, "%s: expected %zu bytes, got %zd",
                     name, expect, buf->len);
        return 0;
    }
    return 1;
}

static PyObject *
py_warp_bilinear_rgb(PyObject *self, PyObject *args)
{
    Py_buffer img, hm, out, valid;
    long ih, iw, oh, ow;

    if (!PyArg_ParseTuple(args, "y*lly*w*w*ll", &img, &ih, &iw, &hm, &out,
                          &valid, &oh, &ow))
        return NULL;
    if (!check_len(&img, (size_t)ih * iw * 3 * 4, "img") ||
        !check_len(&hm, 9 * 8, "hm") ||
        !check_len(&out, (size_t)oh * ow * 3 * 4, "out") ||
        !check_len(&valid, (size_t)oh * ow * 4, "valid")) {
        PyBuffer_Release(&img);
        PyBuffer_Release(&hm);
        PyBuffer_Release(&out);
        PyBuffer_Release(&valid);
        return NULL;
    }
    Py_BEGIN_ALLOW_THREADS
    warp_bilinear_rgb((const float *)img.buf, ih, iw, (const double *)hm.buf,
                      (float *)out.buf, (float *)valid.buf, oh, ow);
    Py_END_ALLOW_THREADS
    PyBuffer_Release(&img);
    PyBuffer_Release(&hm);
    PyBuffer_Release(&out);
    PyBuffer_Release(&valid);
    Py_RETURN_NONE;
}

static PyObject *
py_warp_bilinear_rgb_planar(PyObject *self, PyObject *args)
{
    Py_buffer img, hm, out, valid;
    long ih, iw, oh, ow;

    if (!PyArg_ParseTuple(args, "y*lly*w*w*ll", &img, &ih, &iw, &hm, &out,
                          &valid, &oh, &ow))
        return NULL;
    if (!check_len(&img, (size_t)ih * iw * 3 * 4, "img") ||
        !check_len(&hm, 9 * 8, "hm") ||
        !check_len(&out, (size_t)oh * ow * 3 * 4, "out") ||
        !check_len(&valid, (size_t)oh * ow * 4, "valid")) {
        PyBuffer_Release(&img);
        PyBuffer_Release(&hm);
        PyBuffer_Release(&out);
        PyBuffer_Release(&valid);
        return NULL;
    }
    Py_BEGIN_ALLOW_THREADS
    warp_bilinear_rgb_planar((const float *)img.buf, ih, iw,
                             (const double *)hm.buf, (float *)out.buf,
                             (float *)valid.buf, oh, ow);
    Py_END_ALLOW_THREADS
    PyBuffer_Release(&img);
    PyBuffer_Release(&hm);
    PyBuffer_Release(&out);
    PyBuffer_Release(&valid);
    Py_RETURN_NONE;
}

static PyObject *
py_im2col(PyObject *self, PyObject *args)
{
    Py_buffer xp, cols;
    long n, c, hp, wp, k, stride, dil, oh, ow;

    if (!PyArg_ParseTuple(args, "y*lllllllllw*", &xp, &n, &c, &hp, &wp, &k,
                          &stride, &dil, &oh, &ow, &cols))
        return NULL;
    if (!check_len(&xp, (size_t)n * c * hp * wp * 4, "xp") ||
        !check_len(&cols, (size_t)c * k * k * n * oh * ow * 4, "cols")) {
        PyBuffer_Release(&xp);
        PyBuffer_Release(&cols);
        return NULL;
    }
    Py_BEGIN_ALLOW_THREADS
    im2col_f32((const float *)xp.buf, n, c, hp, wp, k, stride, dil, oh, ow,
               (float *)cols.buf);
    Py_END_ALLOW_THREADS
    PyBuffer_Release(&xp);
    PyBuffer_Release(&cols);
    Py_RETURN_NONE;
}

static PyObject *
py_col2im(PyObject *self, PyObject *args)
{
    Py_buffer cols, xp;
    long n, c, hp, wp, k, stride, dil, oh, ow;

    if (!PyArg_ParseTuple(args, "y*lllllllllw*", &cols, &n, &c, &hp, &wp, &k,
                          &stride, &dil, &oh, &ow, &xp))
        return NULL;
    if (!check_len(&cols, (size_t)c * k * k * n * oh * ow * 4, "cols") ||
        !check_len(&xp, (size_t)n * c * hp * wp * 4, "xp")) {
        PyBuffer_Release(&cols);
        PyBuffer_Release(&xp);
        return NULL;
    }
    Py_BEGIN_ALLOW_THREADS
    col2im_f32((const float *)cols.buf, n, c, hp, wp, k, stride, dil, oh, ow,
               (float *)xp.buf);
    Py_END_ALLOW_THREADS
    PyBuffer_Release(&cols);
    PyBuffer_Release(&xp);
    Py_RETURN_NONE;
}

static PyMethodDef kernel_methods[] = {
    {"warp_bilinear_rgb", py_warp_bilinear_rgb, METH_VARARGS,
     "warp_bilinear_rgb(img, ih, iw, hm, out, valid, oh, ow)"},
    {"warp_bilinear_rgb_planar", py_warp_bilinear_rgb_planar, METH_VARARGS,
     "warp_bilinear_rgb_planar(img, ih, iw, hm, out, valid, oh, ow)"},
    {"im2col", py_im2col, METH_VARARGS,
     "im2col(xp, n, c, hp, wp, k, stride, dil, oh, ow, cols)"},
    {"col2im", py_col2im, METH_VARARGS,
     "col2im(cols, n, c, hp, wp, k, stride, dil, oh, ow, xp)"},
    {NULL, NULL, 0, NULL}};

static struct PyModuleDef kernels_module = {
    PyModuleDef_HEAD_INIT, "_kernels", "sweepsynth native kernels", -1,
    kernel_methods};

PyMODINIT_FUNC
PyInit__kernels(void)
{
    return PyModule_Create(&kernels_module);
}
