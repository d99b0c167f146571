# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im.

Layouts match ``_npkernels`` exactly, including the order in which col2im
accumulates overlapping windows, so both backends agree bitwise.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride):
    """Unfold a padded (N, C, Hp, Wp) array into (N*Ho*Wo, C*kh*kw) rows."""
    cdef Py_ssize_t n_img = xp.shape[0], chans = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    cdef Py_ssize_t n, c, i, j, oh, ow, row, col
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n_img * ho * wo, chans * kh * kw), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    with nogil:
        for n in range(n_img):
            for oh in range(ho):
                for ow in range(wo):
                    row = (n * ho + oh) * wo + ow
                    col = 0
                    for c in range(chans):
                        for i in range(kh):
                            for j in range(kw):
                                out[row, col] = xp[n, c, oh * stride + i, ow * stride + j]
                                col += 1
    return out_arr


def col2im(real[:, ::1] cols, Py_ssize_t n_img, Py_ssize_t chans,
           Py_ssize_t hp, Py_ssize_t wp, int kh, int kw, int stride):
    """Fold (N*Ho*Wo, C*kh*kw) rows back into a padded (N, C, Hp, Wp) array, summing overlaps."""
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    cdef Py_ssize_t n, c, i, j, oh, ow, col
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_img, chans, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    with nogil:
        for n in range(n_img):
            for c in range(chans):
                for i in range(kh):
                    for j in range(kw):
                        col = (c * kh + i) * kw + j
                        for oh in range(ho):
                            for ow in range(wo):
                                out[n, c, oh * stride + i, ow * stride + j] += cols[(n * ho + oh) * wo + ow, col]
    return out_arr
