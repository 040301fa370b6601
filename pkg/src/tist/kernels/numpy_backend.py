"""Pure-numpy implementations of the hot numeric kernels.

Array layout is NHWC for batches and HWC / HW for single images. All
kernels are deterministic: fixed accumulation order, first-winner ties.
The numba backend mirrors these semantics exactly; tests compare both.
"""

import numpy as np


# ---------------------------------------------------------------- conv 3x3

def conv3x3_forward(x, w, b):
    """Same-padding stride-1 3x3 convolution.

    x: (B, H, W, C), w: (3, 3, C, Co), b: (Co,). Returns (B, H, W, Co).
    Decomposed into 9 offset matmuls so the working set stays cache-sized.
    """
    B, H, W, C = x.shape
    Co = w.shape[3]
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:H + 1, 1:W + 1, :] = x
    out = np.zeros((B * H * W, Co), dtype=x.dtype)
    for u in range(3):
        for v in range(3):
            view = np.ascontiguousarray(xp[:, u:u + H, v:v + W, :])
            out += view.reshape(B * H * W, C) @ w[u, v]
    out = out.reshape(B, H, W, Co)
    out += b
    return out

def conv3x3_backward(x, w, dy):
    """Gradients of conv3x3_forward. Returns (dx, dw, db)."""
    B, H, W, C = x.shape
    Co = w.shape[3]
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:H + 1, 1:W + 1, :] = x
    dyf = dy.reshape(B * H * W, Co)
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for u in range(3):
        for v in range(3):
            view = np.ascontiguousarray(xp[:, u:u + H, v:v + W, :])
            dw[u, v] = view.reshape(B * H * W, C).T @ dyf
            contrib = (dyf @ w[u, v].T).reshape(B, H, W, C)
            dxp[:, u:u + H, v:v + W, :] += contrib
    dx = dxp[:, 1:H + 1, 1:W + 1, :]
    db = dy.sum(axis=(0, 1, 2))
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------- conv 1x1

def conv1x1_forward(x, w, b):
    """Pointwise convolution. x: (B, H, W, C), w: (C, Co), b: (Co,)."""
    return x @ w + b

def conv1x1_backward(x, w, dy):
    B, H, W, C = x.shape
    Co = w.shape[1]
    xf = x.reshape(-1, C)
    dyf = dy.reshape(-1, Co)
    dw = xf.T @ dyf
    db = dyf.sum(axis=0)
    dx = (dyf @ w.T).reshape(x.shape)
    return dx, dw, db


# ---------------------------------------------------------------- pooling

def maxpool2_forward(x):
    """2x2 max pooling, stride 2. Returns (y, idx) where idx in {0..3}
    records the winning position (row-major within the window, first
    winner on ties) for the backward pass."""
    B, H, W, C = x.shape
    h2, w2 = H // 2, W // 2
    r = x.reshape(B, h2, 2, w2, 2, C).transpose(0, 1, 3, 5, 2, 4)
    r = np.ascontiguousarray(r).reshape(B, h2, w2, C, 4)
    idx = r.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(r, idx[..., None].astype(np.int64), axis=-1)[..., 0]
    return y, idx

def maxpool2_backward(dy, idx):
    """Scatter dy back to the argmax positions. Returns (B, 2h, 2w, C)."""
    B, h2, w2, C = dy.shape
    scat = np.zeros((B, h2, w2, C, 4), dtype=dy.dtype)
    np.put_along_axis(scat, idx[..., None].astype(np.int64), dy[..., None], axis=-1)
    scat = scat.reshape(B, h2, w2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(scat).reshape(B, h2 * 2, w2 * 2, C)


# ---------------------------------------------------------------- upsample

def upsample2_forward(x):
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=1).repeat(2, axis=2)

def upsample2_backward(dy):
    """Adjoint of nearest upsampling: sum over each 2x2 block."""
    B, H, W, C = dy.shape
    return dy.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


# ---------------------------------------------------------------- warping

def affine_warp_image(img, m, out_h, out_w, fill):
    """Bilinear warp of an HWC image.

    m is a 2x3 float64 matrix mapping output pixel (i, j) to input
    coordinates (r, c). Output pixels mapping outside the input get
    `fill`.
    """
    H, W, C = img.shape
    ii, jj = np.meshgrid(np.arange(out_h, dtype=np.float64),
                         np.arange(out_w, dtype=np.float64), indexing="ij")
    r = m[0, 0] * ii + m[0, 1] * jj + m[0, 2]
    c = m[1, 0] * ii + m[1, 1] * jj + m[1, 2]
    inside = (r >= 0.0) & (r <= H - 1.0) & (c >= 0.0) & (c <= W - 1.0)
    r0 = np.clip(np.floor(r).astype(np.int64), 0, max(H - 2, 0))
    c0 = np.clip(np.floor(c).astype(np.int64), 0, max(W - 2, 0))
    fr = r - r0
    fc = c - c0
    v00 = img[r0, c0]
    v01 = img[r0, c0 + 1]
    v10 = img[r0 + 1, c0]
    v11 = img[r0 + 1, c0 + 1]
    w00 = ((1.0 - fr) * (1.0 - fc))[..., None]
    w01 = ((1.0 - fr) * fc)[..., None]
    w10 = (fr * (1.0 - fc))[..., None]
    w11 = (fr * fc)[..., None]
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    out[~inside] = fill
    return out.astype(img.dtype)

def affine_warp_label(lab, m, out_h, out_w, fill):
    """Nearest-neighbour warp of an HW integer label map.

    Rounding is floor(x + 0.5) so both backends agree on .5 boundaries.
    """
    H, W = lab.shape
    ii, jj = np.meshgrid(np.arange(out_h, dtype=np.float64),
                         np.arange(out_w, dtype=np.float64), indexing="ij")
    r = np.floor(m[0, 0] * ii + m[0, 1] * jj + m[0, 2] + 0.5).astype(np.int64)
    c = np.floor(m[1, 0] * ii + m[1, 1] * jj + m[1, 2] + 0.5).astype(np.int64)
    inside = (r >= 0) & (r <= H - 1) & (c >= 0) & (c <= W - 1)
    out = np.full((out_h, out_w), fill, dtype=lab.dtype)
    out[inside] = lab[r[inside], c[inside]]
    return out


# ---------------------------------------------------------------- blurring

def gaussian_kernel1d(sigma):
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()

def gaussian_blur(img, sigma):
    """Separable Gaussian blur of an HWC image, reflect padding.

    Accumulates in float64 and casts back, so numpy and numba paths
    produce identical bits.
    """
    if sigma <= 0.0:
        return img.copy()
    k = gaussian_kernel1d(sigma)
    radius = (len(k) - 1) // 2
    H, W, _ = img.shape
    xp = np.pad(img.astype(np.float64), ((radius, radius), (0, 0), (0, 0)),
                mode="reflect")
    tmp = np.zeros(img.shape, dtype=np.float64)
    for t in range(len(k)):
        tmp += k[t] * xp[t:t + H]
    xp = np.pad(tmp, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    out = np.zeros(img.shape, dtype=np.float64)
    for t in range(len(k)):
        out += k[t] * xp[:, t:t + W]
    return out.astype(img.dtype)
