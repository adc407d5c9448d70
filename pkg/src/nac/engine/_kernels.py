"""Compiled inner loops for depthwise convolution."""

import numpy as np
from numba import njit


@njit(cache=True)
def depthwise_forward(xp, w, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[1]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            o = out[b, ch]
            for i in range(k):
                for j in range(k):
                    wv = w[ch, i, j]
                    for y in range(ho):
                        row = xp[b, ch, stride * y + i]
                        orow = o[y]
                        if stride == 1:
                            for x in range(wo):
                                orow[x] += wv * row[x + j]
                        else:
                            for x in range(wo):
                                orow[x] += wv * row[stride * x + j]
    return out


@njit(cache=True)
def depthwise_kernel_grad(xp, g, k, stride):
    n, c = xp.shape[0], xp.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    dw = np.zeros((c, k, k), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    acc = 0.0
                    for y in range(ho):
                        row = xp[b, ch, stride * y + i]
                        grow = g[b, ch, y]
                        for x in range(wo):
                            acc += grow[x] * row[stride * x + j]
                    dw[ch, i, j] += acc
    return dw
