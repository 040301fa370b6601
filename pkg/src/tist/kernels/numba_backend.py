"""Numba-accelerated kernels.

The gather/scatter/pool/warp/blur inner loops run under @njit; matmuls
stay on numpy's BLAS (nothing to fuse there, and sharing them keeps the
two backends bit-identical). Semantics match numpy_backend exactly: same
accumulation order, same tie rules, same rounding.
"""

import numpy as np
from numba import njit, prange

from .numpy_backend import conv1x1_forward, conv1x1_backward, gaussian_kernel1d

__all__ = [
    "conv3x3_forward", "conv3x3_backward",
    "conv1x1_forward", "conv1x1_backward",
    "maxpool2_forward", "maxpool2_backward",
    "upsample2_forward", "upsample2_backward",
    "affine_warp_image", "affine_warp_label",
    "gaussian_blur", "gaussian_kernel1d",
]


@njit(cache=True, parallel=True)
def _gather_offset(xp, u, v, H, W, buf):
    B = xp.shape[0]
    C = xp.shape[3]
    for bi in prange(B * H):
        b = bi // H
        i = bi % H
        for j in range(W):
            row = bi * W + j
            for c in range(C):
                buf[row, c] = xp[b, i + u, j + v, c]


@njit(cache=True, parallel=True)
def _scatter_add_offset(dxp, u, v, H, W, contrib):
    B = dxp.shape[0]
    C = dxp.shape[3]
    for bi in prange(B * H):
        b = bi // H
        i = bi % H
        for j in range(W):
            row = bi * W + j
            for c in range(C):
                dxp[b, i + u, j + v, c] += contrib[row, c]


def conv3x3_forward(x, w, b):
    B, H, W, C = x.shape
    Co = w.shape[3]
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:H + 1, 1:W + 1, :] = x
    buf = np.empty((B * H * W, C), dtype=x.dtype)
    out = np.zeros((B * H * W, Co), dtype=x.dtype)
    for u in range(3):
        for v in range(3):
            _gather_offset(xp, u, v, H, W, buf)
            out += buf @ w[u, v]
    out = out.reshape(B, H, W, Co)
    out += b
    return out


def conv3x3_backward(x, w, dy):
    B, H, W, C = x.shape
    Co = w.shape[3]
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:H + 1, 1:W + 1, :] = x
    dyf = dy.reshape(B * H * W, Co)
    buf = np.empty((B * H * W, C), dtype=x.dtype)
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for u in range(3):
        for v in range(3):
            _gather_offset(xp, u, v, H, W, buf)
            dw[u, v] = buf.T @ dyf
            contrib = np.ascontiguousarray(dyf @ w[u, v].T)
            _scatter_add_offset(dxp, u, v, H, W, contrib)
    dx = np.ascontiguousarray(dxp[:, 1:H + 1, 1:W + 1, :])
    db = dy.sum(axis=(0, 1, 2))
    return dx, dw, db


@njit(cache=True, parallel=True)
def _maxpool2(x, y, idx):
    B, h2, w2, C = y.shape
    for bi in prange(B * h2):
        b = bi // h2
        i = bi % h2
        for j in range(w2):
            for c in range(C):
                best = x[b, 2 * i, 2 * j, c]
                pos = np.uint8(0)
                for u in range(2):
                    for v in range(2):
                        val = x[b, 2 * i + u, 2 * j + v, c]
                        if val > best:
                            best = val
                            pos = np.uint8(u * 2 + v)
                y[b, i, j, c] = best
                idx[b, i, j, c] = pos


def maxpool2_forward(x):
    B, H, W, C = x.shape
    y = np.empty((B, H // 2, W // 2, C), dtype=x.dtype)
    idx = np.empty((B, H // 2, W // 2, C), dtype=np.uint8)
    _maxpool2(x, y, idx)
    return y, idx


@njit(cache=True, parallel=True)
def _maxpool2_bwd(dy, idx, dx):
    B, h2, w2, C = dy.shape
    for bi in prange(B * h2):
        b = bi // h2
        i = bi % h2
        for j in range(w2):
            for c in range(C):
                p = idx[b, i, j, c]
                dx[b, 2 * i + p // 2, 2 * j + p % 2, c] = dy[b, i, j, c]


def maxpool2_backward(dy, idx):
    B, h2, w2, C = dy.shape
    dx = np.zeros((B, h2 * 2, w2 * 2, C), dtype=dy.dtype)
    _maxpool2_bwd(dy, idx, dx)
    return dx


@njit(cache=True, parallel=True)
def _upsample2(x, y):
    B, H, W, C = x.shape
    for bi in prange(B * H):
        b = bi // H
        i = bi % H
        for j in range(W):
            for c in range(C):
                val = x[b, i, j, c]
                y[b, 2 * i, 2 * j, c] = val
                y[b, 2 * i, 2 * j + 1, c] = val
                y[b, 2 * i + 1, 2 * j, c] = val
                y[b, 2 * i + 1, 2 * j + 1, c] = val


def upsample2_forward(x):
    B, H, W, C = x.shape
    y = np.empty((B, H * 2, W * 2, C), dtype=x.dtype)
    _upsample2(x, y)
    return y


@njit(cache=True, parallel=True)
def _upsample2_bwd(dy, dx):
    B, H, W, C = dx.shape
    for bi in prange(B * H):
        b = bi // H
        i = bi % H
        for j in range(W):
            for c in range(C):
                dx[b, i, j, c] = (dy[b, 2 * i, 2 * j, c]
                                  + dy[b, 2 * i, 2 * j + 1, c]
                                  + dy[b, 2 * i + 1, 2 * j, c]
                                  + dy[b, 2 * i + 1, 2 * j + 1, c])


def upsample2_backward(dy):
    B, H, W, C = dy.shape
    dx = np.empty((B, H // 2, W // 2, C), dtype=dy.dtype)
    _upsample2_bwd(dy, dx)
    return dx


@njit(cache=True, parallel=True)
def _warp_image(img, m00, m01, m02, m10, m11, m12, out, fill):
    H, W, C = img.shape
    out_h, out_w = out.shape[0], out.shape[1]
    hm2 = H - 2 if H >= 2 else 0
    wm2 = W - 2 if W >= 2 else 0
    for i in prange(out_h):
        for j in range(out_w):
            r = m00 * i + m01 * j + m02
            c = m10 * i + m11 * j + m12
            if r >= 0.0 and r <= H - 1.0 and c >= 0.0 and c <= W - 1.0:
                r0 = int(np.floor(r))
                c0 = int(np.floor(c))
                if r0 < 0:
                    r0 = 0
                elif r0 > hm2:
                    r0 = hm2
                if c0 < 0:
                    c0 = 0
                elif c0 > wm2:
                    c0 = wm2
                fr = r - r0
                fc = c - c0
                w00 = (1.0 - fr) * (1.0 - fc)
                w01 = (1.0 - fr) * fc
                w10 = fr * (1.0 - fc)
                w11 = fr * fc
                for ch in range(C):
                    out[i, j, ch] = (w00 * img[r0, c0, ch]
                                     + w01 * img[r0, c0 + 1, ch]
                                     + w10 * img[r0 + 1, c0, ch]
                                     + w11 * img[r0 + 1, c0 + 1, ch])
            else:
                for ch in range(C):
                    out[i, j, ch] = fill


def affine_warp_image(img, m, out_h, out_w, fill):
    out = np.empty((out_h, out_w, img.shape[2]), dtype=np.float64)
    _warp_image(img.astype(np.float64), m[0, 0], m[0, 1], m[0, 2],
                m[1, 0], m[1, 1], m[1, 2], out, float(fill))
    return out.astype(img.dtype)


@njit(cache=True, parallel=True)
def _warp_label(lab, m00, m01, m02, m10, m11, m12, out, fill):
    H, W = lab.shape
    out_h, out_w = out.shape
    for i in prange(out_h):
        for j in range(out_w):
            r = int(np.floor(m00 * i + m01 * j + m02 + 0.5))
            c = int(np.floor(m10 * i + m11 * j + m12 + 0.5))
            if 0 <= r <= H - 1 and 0 <= c <= W - 1:
                out[i, j] = lab[r, c]
            else:
                out[i, j] = fill


def affine_warp_label(lab, m, out_h, out_w, fill):
    out = np.empty((out_h, out_w), dtype=lab.dtype)
    _warp_label(lab, m[0, 0], m[0, 1], m[0, 2],
                m[1, 0], m[1, 1], m[1, 2], out, lab.dtype.type(fill))
    return out


@njit(cache=True)
def _reflect(i, n):
    while i < 0 or i > n - 1:
        if i < 0:
            i = -i
        if i > n - 1:
            i = 2 * (n - 1) - i
    return i


@njit(cache=True, parallel=True)
def _blur_axis0(x, k, out):
    H, W, C = x.shape
    radius = (len(k) - 1) // 2
    for i in prange(H):
        for t in range(len(k)):
            src = _reflect(i + t - radius, H)
            kv = k[t]
            for j in range(W):
                for c in range(C):
                    out[i, j, c] += kv * x[src, j, c]


@njit(cache=True, parallel=True)
def _blur_axis1(x, k, out):
    H, W, C = x.shape
    radius = (len(k) - 1) // 2
    for i in prange(H):
        for t in range(len(k)):
            kv = k[t]
            for j in range(W):
                src = _reflect(j + t - radius, W)
                for c in range(C):
                    out[i, j, c] += kv * x[i, src, c]


def gaussian_blur(img, sigma):
    if sigma <= 0.0:
        return img.copy()
    k = gaussian_kernel1d(sigma)
    x = img.astype(np.float64)
    tmp = np.zeros(x.shape, dtype=np.float64)
    _blur_axis0(x, k, tmp)
    out = np.zeros(x.shape, dtype=np.float64)
    _blur_axis1(tmp, k, out)
    return out.astype(img.dtype)
