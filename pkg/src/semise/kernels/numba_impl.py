"""Numba-jitted kernels: plain loop nests, single-threaded for bit-level
run-to-run determinism. Semantics match :mod:`.numpy_impl` exactly; summation
order may differ in the last ulp (numpy uses BLAS contractions)."""

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(x, w, bias):
    b, c, h, wd = x.shape
    f = w.shape[0]
    oh, ow = h // 2, wd // 2
    y = np.empty((b, f, oh, ow), dtype=np.float64)
    for n in range(b):
        for o in range(f):
            for oy in range(oh):
                for ox in range(ow):
                    acc = bias[o]
                    for ci in range(c):
                        for ki in range(3):
                            iy = 2 * oy + ki - 1
                            if iy < 0 or iy >= h:
                                continue
                            for kj in range(3):
                                ix = 2 * ox + kj - 1
                                if ix < 0 or ix >= wd:
                                    continue
                                acc += x[n, ci, iy, ix] * w[o, ci, ki, kj]
                    y[n, o, oy, ox] = acc
    return y


@njit(cache=True)
def conv2d_backward(x, w, dy):
    b, c, h, wd = x.shape
    f = w.shape[0]
    oh, ow = dy.shape[2], dy.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(f, dtype=np.float64)
    for n in range(b):
        for o in range(f):
            for oy in range(oh):
                for ox in range(ow):
                    g = dy[n, o, oy, ox]
                    db[o] += g
                    for ci in range(c):
                        for ki in range(3):
                            iy = 2 * oy + ki - 1
                            if iy < 0 or iy >= h:
                                continue
                            for kj in range(3):
                                ix = 2 * ox + kj - 1
                                if ix < 0 or ix >= wd:
                                    continue
                                dx[n, ci, iy, ix] += g * w[o, ci, ki, kj]
                                dw[o, ci, ki, kj] += g * x[n, ci, iy, ix]
    return dx, dw, db


@njit(cache=True)
def convt2d_forward(x, w, bias):
    b, c, h, wd = x.shape
    f = w.shape[1]
    nh, nw = 2 * h, 2 * wd
    y = np.empty((b, f, nh, nw), dtype=np.float64)
    for n in range(b):
        for o in range(f):
            for yy in range(nh):
                for xx in range(nw):
                    y[n, o, yy, xx] = bias[o]
    for n in range(b):
        for ci in range(c):
            for iy in range(h):
                for ix in range(wd):
                    v = x[n, ci, iy, ix]
                    for o in range(f):
                        for ki in range(3):
                            yy = 2 * iy + ki - 1
                            if yy < 0 or yy >= nh:
                                continue
                            for kj in range(3):
                                xx = 2 * ix + kj - 1
                                if xx < 0 or xx >= nw:
                                    continue
                                y[n, o, yy, xx] += v * w[ci, o, ki, kj]
    return y


@njit(cache=True)
def convt2d_backward(x, w, dy):
    b, c, h, wd = x.shape
    f = w.shape[1]
    nh, nw = dy.shape[2], dy.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(f, dtype=np.float64)
    for n in range(b):
        for o in range(f):
            for yy in range(nh):
                for xx in range(nw):
                    db[o] += dy[n, o, yy, xx]
    for n in range(b):
        for ci in range(c):
            for iy in range(h):
                for ix in range(wd):
                    acc = 0.0
                    for o in range(f):
                        for ki in range(3):
                            yy = 2 * iy + ki - 1
                            if yy < 0 or yy >= nh:
                                continue
                            for kj in range(3):
                                xx = 2 * ix + kj - 1
                                if xx < 0 or xx >= nw:
                                    continue
                                g = dy[n, o, yy, xx]
                                acc += g * w[ci, o, ki, kj]
                                dw[ci, o, ki, kj] += g * x[n, ci, iy, ix]
                    dx[n, ci, iy, ix] = acc
    return dx, dw, db
