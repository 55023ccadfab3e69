# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled window sampling kernels (same contract as kernels.reference)."""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

NAME = "cython"

ctypedef fused real:
    float
    double


def bilinear_gather(real[:, :, :, ::1] z, real[:, ::1] px, real[:, ::1] py):
    cdef Py_ssize_t B = z.shape[0], C = z.shape[1], H = z.shape[2], W = z.shape[3]
    cdef Py_ssize_t P = px.shape[1]
    dtype = np.float64 if real is double else np.float32
    out_arr = np.zeros((B, P, C), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, p, c, x0, y0
    cdef real x, y, wx1, wx0, wy1, wy0
    cdef real w00, w01, w10, w11
    cdef bint in00, in01, in10, in11

    for b in range(B):
        for p in range(P):
            x = px[b, p]
            y = py[b, p]
            x0 = <Py_ssize_t>floor(x)
            y0 = <Py_ssize_t>floor(y)
            wx1 = x - <real>x0
            wx0 = 1.0 - wx1
            wy1 = y - <real>y0
            wy0 = 1.0 - wy1
            in00 = 0 <= y0 < H and 0 <= x0 < W
            in01 = 0 <= y0 < H and 0 <= x0 + 1 < W
            in10 = 0 <= y0 + 1 < H and 0 <= x0 < W
            in11 = 0 <= y0 + 1 < H and 0 <= x0 + 1 < W
            w00 = wy0 * wx0
            w01 = wy0 * wx1
            w10 = wy1 * wx0
            w11 = wy1 * wx1
            for c in range(C):
                out[b, p, c] = (
                    (z[b, c, y0, x0] * w00 if in00 else 0.0)
                    + (z[b, c, y0, x0 + 1] * w01 if in01 else 0.0)
                    + (z[b, c, y0 + 1, x0] * w10 if in10 else 0.0)
                    + (z[b, c, y0 + 1, x0 + 1] * w11 if in11 else 0.0)
                )
    return out_arr


def bilinear_gather_grad(real[:, :, :, ::1] z, real[:, ::1] px,
                         real[:, ::1] py, real[:, :, ::1] dout):
    cdef Py_ssize_t B = z.shape[0], C = z.shape[1], H = z.shape[2], W = z.shape[3]
    cdef Py_ssize_t P = px.shape[1]
    dtype = np.float64 if real is double else np.float32
    dz_arr = np.zeros((B, C, H, W), dtype=dtype)
    dpx_arr = np.zeros((B, P), dtype=dtype)
    dpy_arr = np.zeros((B, P), dtype=dtype)
    cdef real[:, :, :, ::1] dz = dz_arr
    cdef real[:, ::1] dpx = dpx_arr
    cdef real[:, ::1] dpy = dpy_arr
    cdef Py_ssize_t b, p, c, x0, y0
    cdef real x, y, wx1, wx0, wy1, wy0, g
    cdef real v00, v01, v10, v11, gx, gy
    cdef bint in00, in01, in10, in11

    for b in range(B):
        for p in range(P):
            x = px[b, p]
            y = py[b, p]
            x0 = <Py_ssize_t>floor(x)
            y0 = <Py_ssize_t>floor(y)
            wx1 = x - <real>x0
            wx0 = 1.0 - wx1
            wy1 = y - <real>y0
            wy0 = 1.0 - wy1
            in00 = 0 <= y0 < H and 0 <= x0 < W
            in01 = 0 <= y0 < H and 0 <= x0 + 1 < W
            in10 = 0 <= y0 + 1 < H and 0 <= x0 < W
            in11 = 0 <= y0 + 1 < H and 0 <= x0 + 1 < W
            gx = 0.0
            gy = 0.0
            for c in range(C):
                g = dout[b, p, c]
                v00 = z[b, c, y0, x0] if in00 else 0.0
                v01 = z[b, c, y0, x0 + 1] if in01 else 0.0
                v10 = z[b, c, y0 + 1, x0] if in10 else 0.0
                v11 = z[b, c, y0 + 1, x0 + 1] if in11 else 0.0
                if in00:
                    dz[b, c, y0, x0] += g * wy0 * wx0
                if in01:
                    dz[b, c, y0, x0 + 1] += g * wy0 * wx1
                if in10:
                    dz[b, c, y0 + 1, x0] += g * wy1 * wx0
                if in11:
                    dz[b, c, y0 + 1, x0 + 1] += g * wy1 * wx1
                gx += g * ((v01 - v00) * wy0 + (v11 - v10) * wy1)
                gy += g * ((v10 - v00) * wx0 + (v11 - v01) * wx1)
            dpx[b, p] = gx
            dpy[b, p] = gy
    return dz_arr, dpx_arr, dpy_arr
