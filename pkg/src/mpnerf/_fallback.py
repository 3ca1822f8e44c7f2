"""Pure-numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` argument for argument and are used whenever the
compiled extension is unavailable or ``MPNERF_PURE_PYTHON=1`` is set.
"""

import numpy as np

EPS_DEPTH = 1e-6


def bilinear_lookup(image, u, v):
    """Bilinear colors at in-bounds continuous coords ``u, v`` (1-D arrays).

    Coordinates are clamped to the band of pixel centers first, so the half
    pixel along each border replicates the edge color.
    """
    height, width = image.shape[:2]
    x = np.clip(u, 0.5, width - 0.5) - 0.5
    y = np.clip(v, 0.5, height - 0.5) - 0.5
    i0 = np.clip(np.floor(x).astype(np.int64), 0, max(width - 2, 0))
    j0 = np.clip(np.floor(y).astype(np.int64), 0, max(height - 2, 0))
    i1 = np.minimum(i0 + 1, width - 1)
    j1 = np.minimum(j0 + 1, height - 1)
    fx = (x - i0)[:, None]
    fy = (y - j0)[:, None]
    top = image[j0, i0] * (1.0 - fx) + image[j0, i1] * fx
    bottom = image[j1, i0] * (1.0 - fx) + image[j1, i1] * fx
    return top * (1.0 - fy) + bottom * fy


def gather_features(points, images, w2c, focal, cam_pos, generalization, out):
    """Fill ``out`` (M, block*n) with per-reference (rgb, uv_norm[, position]) blocks.

    ``points`` is (M, 3) float64, ``images`` (n, H, W, 3), ``w2c`` (n, 3, 4)
    float64, ``cam_pos`` (n, 3) float64.
    """
    n, height, width = images.shape[:3]
    block = 8 if generalization else 5
    cx, cy = width / 2.0, height / 2.0
    for k in range(n):
        pc = points @ w2c[k, :, :3].T + w2c[k, :, 3]
        z = pc[:, 2]
        in_front = z < -EPS_DEPTH
        depth = np.where(in_front, -z, EPS_DEPTH)
        u = cx + focal * pc[:, 0] / depth
        v = cy - focal * pc[:, 1] / depth
        valid = in_front & (u >= 0) & (u < width) & (v >= 0) & (v < height)
        base = k * block
        rgb = np.zeros((points.shape[0], 3))
        if valid.any():
            rgb[valid] = bilinear_lookup(images[k], u[valid], v[valid])
        out[:, base : base + 3] = rgb
        out[:, base + 3] = np.clip(2.0 * u / width - 1.0, -1.0, 1.0)
        out[:, base + 4] = np.clip(2.0 * v / height - 1.0, -1.0, 1.0)
        if generalization:
            out[:, base + 5 : base + 8] = cam_pos[k]
    return out


def composite_forward(sigma, rgb, delta, background, color_out, weights_out):
    """Alpha-composite R rays of N samples. Returns final transmittance (R,)."""
    optical = sigma * delta
    passing = np.exp(-optical)
    trans = np.cumprod(passing, axis=1)
    t_excl = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=1)
    weights = t_excl * (1.0 - passing)
    weights_out[...] = weights
    acc = weights.sum(axis=1)
    color_out[...] = np.einsum("rn,rnc->rc", weights, rgb) + (1.0 - acc)[:, None] * background
    return trans[:, -1].copy()


def composite_backward(sigma, rgb, delta, weights, background, grad_color, d_sigma_out, d_rgb_out):
    """Reverse-mode gradients of composite_forward w.r.t. sigma and rgb."""
    d_rgb_out[...] = weights[:, :, None] * grad_color[:, None, :]
    # trans[:, i] is T_{i+1}, the transmittance just past sample i
    trans = np.cumprod(np.exp(-sigma * delta), axis=1)
    cg = np.einsum("rnc,rc->rn", rgb, grad_color)
    wc = weights * cg
    # suffix[i] = sum_{j>i} w_j (c_j . g) + T_{N+1} (bg . g)
    tail = (trans[:, -1] * (grad_color @ background))[:, None]
    rev = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1]
    suffix = np.concatenate([rev[:, 1:], np.zeros_like(rev[:, :1])], axis=1) + tail
    d_sigma_out[...] = delta * (trans * cg - suffix)
