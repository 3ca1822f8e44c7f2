# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the per-sample kernels in ``_fallback.py``.

All arithmetic is carried out in double precision; results are stored in the
dtype of the output buffer.
"""

from libc.math cimport exp, floor
from libc.stdlib cimport free, malloc

ctypedef fused real:
    float
    double

cdef double EPS_DEPTH = 1e-6


cdef inline double _clampd(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def gather_features(const double[:, ::1] points, const real[:, :, :, ::1] images,
                    const double[:, :, ::1] w2c, double focal, const double[:, ::1] cam_pos,
                    bint generalization, real[:, ::1] out):
    cdef Py_ssize_t m_count = points.shape[0]
    cdef Py_ssize_t n = images.shape[0]
    cdef Py_ssize_t height = images.shape[1]
    cdef Py_ssize_t width = images.shape[2]
    cdef Py_ssize_t block = 8 if generalization else 5
    cdef double cx = width / 2.0
    cdef double cy = height / 2.0
    cdef Py_ssize_t m, k, c, base, i0, i1, j0, j1
    cdef double px, py, pz, xc, yc, zc, depth, u, v, x, y, fx, fy
    cdef bint valid

    with nogil:
        for m in range(m_count):
            px = points[m, 0]
            py = points[m, 1]
            pz = points[m, 2]
            for k in range(n):
                base = k * block
                xc = w2c[k, 0, 0] * px + w2c[k, 0, 1] * py + w2c[k, 0, 2] * pz + w2c[k, 0, 3]
                yc = w2c[k, 1, 0] * px + w2c[k, 1, 1] * py + w2c[k, 1, 2] * pz + w2c[k, 1, 3]
                zc = w2c[k, 2, 0] * px + w2c[k, 2, 1] * py + w2c[k, 2, 2] * pz + w2c[k, 2, 3]
                valid = zc < -EPS_DEPTH
                depth = -zc if valid else EPS_DEPTH
                u = cx + focal * xc / depth
                v = cy - focal * yc / depth
                valid = valid and u >= 0 and u < width and v >= 0 and v < height
                if valid:
                    x = _clampd(u, 0.5, width - 0.5) - 0.5
                    y = _clampd(v, 0.5, height - 0.5) - 0.5
                    i0 = <Py_ssize_t>floor(x)
                    j0 = <Py_ssize_t>floor(y)
                    if i0 > width - 2:
                        i0 = width - 2
                    if j0 > height - 2:
                        j0 = height - 2
                    if i0 < 0:
                        i0 = 0
                    if j0 < 0:
                        j0 = 0
                    i1 = i0 + 1 if i0 + 1 < width else width - 1
                    j1 = j0 + 1 if j0 + 1 < height else height - 1
                    fx = x - i0
                    fy = y - j0
                    for c in range(3):
                        out[m, base + c] = <real>(
                            (images[k, j0, i0, c] * (1.0 - fx) + images[k, j0, i1, c] * fx) * (1.0 - fy)
                            + (images[k, j1, i0, c] * (1.0 - fx) + images[k, j1, i1, c] * fx) * fy
                        )
                else:
                    for c in range(3):
                        out[m, base + c] = 0
                out[m, base + 3] = <real>_clampd(2.0 * u / width - 1.0, -1.0, 1.0)
                out[m, base + 4] = <real>_clampd(2.0 * v / height - 1.0, -1.0, 1.0)
                if generalization:
                    for c in range(3):
                        out[m, base + 5 + c] = <real>cam_pos[k, c]
    return out


def composite_forward(const real[:, ::1] sigma, const real[:, :, ::1] rgb, const real[:, ::1] delta,
                      const double[::1] background, real[:, ::1] color_out, real[:, ::1] weights_out):
    cdef Py_ssize_t r_count = sigma.shape[0]
    cdef Py_ssize_t n = sigma.shape[1]
    cdef Py_ssize_t r, i, c
    cdef double trans, passing, w, acc, c0, c1, c2
    import numpy as np
    t_final_arr = np.empty(r_count, dtype=np.float64)
    cdef double[::1] t_final = t_final_arr

    with nogil:
        for r in range(r_count):
            trans = 1.0
            acc = 0.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            for i in range(n):
                passing = exp(-(<double>sigma[r, i]) * delta[r, i])
                w = trans * (1.0 - passing)
                weights_out[r, i] = <real>w
                acc += w
                c0 += w * rgb[r, i, 0]
                c1 += w * rgb[r, i, 1]
                c2 += w * rgb[r, i, 2]
                trans *= passing
            color_out[r, 0] = <real>(c0 + (1.0 - acc) * background[0])
            color_out[r, 1] = <real>(c1 + (1.0 - acc) * background[1])
            color_out[r, 2] = <real>(c2 + (1.0 - acc) * background[2])
            t_final[r] = trans
    return t_final_arr


def composite_backward(const real[:, ::1] sigma, const real[:, :, ::1] rgb, const real[:, ::1] delta,
                       const real[:, ::1] weights, const double[::1] background,
                       const real[:, ::1] grad_color, real[:, ::1] d_sigma_out,
                       real[:, :, ::1] d_rgb_out):
    cdef Py_ssize_t r_count = sigma.shape[0]
    cdef Py_ssize_t n = sigma.shape[1]
    cdef Py_ssize_t r, i, c
    cdef double trans, suffix, cg, g0, g1, g2, w
    cdef double *tbuf = <double *>malloc(max(n, 1) * sizeof(double))
    if tbuf == NULL:
        raise MemoryError()

    with nogil:
        for r in range(r_count):
            g0 = grad_color[r, 0]
            g1 = grad_color[r, 1]
            g2 = grad_color[r, 2]
            # tbuf[i] = T_{i+1}, the transmittance just past sample i
            trans = 1.0
            for i in range(n):
                trans *= exp(-(<double>sigma[r, i]) * delta[r, i])
                tbuf[i] = trans
            # suffix = sum_{j>i} w_j (c_j . g) + T_{N+1} (bg . g)
            suffix = trans * (g0 * background[0] + g1 * background[1] + g2 * background[2])
            for i in range(n - 1, -1, -1):
                w = weights[r, i]
                cg = g0 * rgb[r, i, 0] + g1 * rgb[r, i, 1] + g2 * rgb[r, i, 2]
                d_sigma_out[r, i] = <real>(delta[r, i] * (tbuf[i] * cg - suffix))
                d_rgb_out[r, i, 0] = <real>(w * g0)
                d_rgb_out[r, i, 1] = <real>(w * g1)
                d_rgb_out[r, i, 2] = <real>(w * g2)
                suffix += w * cg
    free(tbuf)
