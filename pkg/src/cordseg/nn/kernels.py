"""Numba kernels for dilated convolutions in 2D and 3D.

Every output element is accumulated in float64 with a fixed tap order
(channel, then kernel offsets in lexicographic order), so results are
bit-identical to a scalar sliding-window loop regardless of thread count.
Out-of-bounds taps (zero padding) are skipped. Bias is added by the caller
after the kernel, as the final addition per element.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def conv2d_forward(x, w, dilation, out):  # pragma: no cover - compiled
    n_batch, c_in, h, wd = x.shape
    f_out = w.shape[0]
    k = w.shape[2]
    pad = dilation * (k - 1) // 2
    for nf in prange(n_batch * f_out):
        n = nf // f_out
        f = nf % f_out
        for y in range(h):
            for xx in range(wd):
                acc = 0.0
                for c in range(c_in):
                    for ki in range(k):
                        yy = y + ki * dilation - pad
                        if yy < 0 or yy >= h:
                            continue
                        for kj in range(k):
                            xj = xx + kj * dilation - pad
                            if 0 <= xj < wd:
                                acc += w[f, c, ki, kj] * x[n, c, yy, xj]
                out[n, f, y, xx] = acc


@njit(cache=True, parallel=True)
def conv2d_backward_input(gout, w, dilation, gx):  # pragma: no cover
    n_batch, c_in, h, wd = gx.shape
    f_out = w.shape[0]
    k = w.shape[2]
    pad = dilation * (k - 1) // 2
    for nc in prange(n_batch * c_in):
        n = nc // c_in
        c = nc % c_in
        for y in range(h):
            for xx in range(wd):
                acc = 0.0
                for f in range(f_out):
                    for ki in range(k):
                        yy = y - (ki * dilation - pad)
                        if yy < 0 or yy >= h:
                            continue
                        for kj in range(k):
                            xj = xx - (kj * dilation - pad)
                            if 0 <= xj < wd:
                                acc += w[f, c, ki, kj] * gout[n, f, yy, xj]
                gx[n, c, y, xx] = acc


@njit(cache=True, parallel=True)
def conv2d_backward_weight(x, gout, dilation, gw):  # pragma: no cover
    n_batch, c_in, h, wd = x.shape
    f_out = gw.shape[0]
    k = gw.shape[2]
    pad = dilation * (k - 1) // 2
    for fc in prange(f_out * c_in):
        f = fc // c_in
        c = fc % c_in
        for ki in range(k):
            for kj in range(k):
                acc = 0.0
                for n in range(n_batch):
                    for y in range(h):
                        yy = y + ki * dilation - pad
                        if yy < 0 or yy >= h:
                            continue
                        for xx in range(wd):
                            xj = xx + kj * dilation - pad
                            if 0 <= xj < wd:
                                acc += gout[n, f, y, xx] * x[n, c, yy, xj]
                gw[f, c, ki, kj] = acc


@njit(cache=True, parallel=True)
def conv3d_forward(x, w, dilation, out):  # pragma: no cover
    n_batch, c_in, d, h, wd = x.shape
    f_out = w.shape[0]
    k = w.shape[2]
    pad = dilation * (k - 1) // 2
    for nf in prange(n_batch * f_out):
        n = nf // f_out
        f = nf % f_out
        for z in range(d):
            for y in range(h):
                for xx in range(wd):
                    acc = 0.0
                    for c in range(c_in):
                        for kz in range(k):
                            zz = z + kz * dilation - pad
                            if zz < 0 or zz >= d:
                                continue
                            for ki in range(k):
                                yy = y + ki * dilation - pad
                                if yy < 0 or yy >= h:
                                    continue
                                for kj in range(k):
                                    xj = xx + kj * dilation - pad
                                    if 0 <= xj < wd:
                                        acc += w[f, c, kz, ki, kj] * x[n, c, zz, yy, xj]
                    out[n, f, z, y, xx] = acc


@njit(cache=True, parallel=True)
def conv3d_backward_input(gout, w, dilation, gx):  # pragma: no cover
    n_batch, c_in, d, h, wd = gx.shape
    f_out = w.shape[0]
    k = w.shape[2]
    pad = dilation * (k - 1) // 2
    for nc in prange(n_batch * c_in):
        n = nc // c_in
        c = nc % c_in
        for z in range(d):
            for y in range(h):
                for xx in range(wd):
                    acc = 0.0
                    for f in range(f_out):
                        for kz in range(k):
                            zz = z - (kz * dilation - pad)
                            if zz < 0 or zz >= d:
                                continue
                            for ki in range(k):
                                yy = y - (ki * dilation - pad)
                                if yy < 0 or yy >= h:
                                    continue
                                for kj in range(k):
                                    xj = xx - (kj * dilation - pad)
                                    if 0 <= xj < wd:
                                        acc += w[f, c, kz, ki, kj] * gout[n, f, zz, yy, xj]
                    gx[n, c, z, y, xx] = acc


@njit(cache=True, parallel=True)
def conv3d_backward_weight(x, gout, dilation, gw):  # pragma: no cover
    n_batch, c_in, d, h, wd = x.shape
    f_out = gw.shape[0]
    k = gw.shape[2]
    pad = dilation * (k - 1) // 2
    for fc in prange(f_out * c_in):
        f = fc // c_in
        c = fc % c_in
        for kz in range(k):
            for ki in range(k):
                for kj in range(k):
                    acc = 0.0
                    for n in range(n_batch):
                        for z in range(d):
                            zz = z + kz * dilation - pad
                            if zz < 0 or zz >= d:
                                continue
                            for y in range(h):
                                yy = y + ki * dilation - pad
                                if yy < 0 or yy >= h:
                                    continue
                                for xx in range(wd):
                                    xj = xx + kj * dilation - pad
                                    if 0 <= xj < wd:
                                        acc += gout[n, f, z, y, xx] * x[n, c, zz, yy, xj]
                    gw[f, c, kz, ki, kj] = acc
