"""Independent reference implementations used as test oracles.

These are written from the defining formulas with plain loops and direct
sums.  The finite-difference gradient is the exception: it deliberately
differentiates the package's own forward pass, which is what the analytic
backward pass must agree with.
"""

import math

import numpy as np

from mpnerf.decoder import DecoderParams, forward


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def encode_oracle(v, n_freq):
    out = []
    for x in v:
        for k in range(n_freq):
            out += [math.sin(2.0 ** k * math.pi * x), math.cos(2.0 ** k * math.pi * x)]
    return np.array(out)


def forward_oracle(params, x_in, d):
    """Plain per-sample evaluation of the decoder topology in float64."""
    arch = params.arch
    layers = [(np.asarray(w, np.float64), np.asarray(b, np.float64)) for w, b in params.layers]
    n = len(arch.hidden)
    h = np.asarray(x_in, np.float64)
    for w, b in layers[:n]:
        h = np.array([max(0.0, v) for v in w.T @ h + b])
    s = float((layers[n][0].T @ h + layers[n][1])[0])
    sigma = math.log1p(math.exp(-abs(s))) + max(s, 0.0)
    feat = layers[n + 1][0].T @ h + layers[n + 1][1]
    c_in = np.concatenate([feat, encode_oracle(d, arch.dir_freqs)])
    hid = np.maximum(layers[n + 2][0].T @ c_in + layers[n + 2][1], 0.0)
    logits = layers[n + 3][0].T @ hid + layers[n + 3][1]
    return 1.0 / (1.0 + np.exp(-logits)), sigma


def relu_margin(params, x_in, d):
    """Smallest |pre-activation| over every ReLU unit for one sample."""
    arch = params.arch
    n = len(arch.hidden)
    h = np.asarray(x_in, np.float64)
    margin = np.inf
    for w, b in params.layers[:n]:
        pre = w.T @ h + b
        margin = min(margin, np.abs(pre).min())
        h = np.maximum(pre, 0.0)
    feat = params.layers[n + 1][0].T @ h + params.layers[n + 1][1]
    c_in = np.concatenate([feat, encode_oracle(d, arch.dir_freqs)])
    pre = params.layers[n + 2][0].T @ c_in + params.layers[n + 2][1]
    return min(margin, np.abs(pre).min())


def randomized(arch, seed):
    """Parameters with nonzero biases so every branch of the gradient is exercised."""
    rng = np.random.default_rng(seed)
    layers = [(rng.normal(0, 0.7, (i, o)), rng.normal(0, 0.3, o)) for i, o in arch.layer_shapes()]
    return DecoderParams(arch, layers)


def scalar_loss(params, z, d, up_rgb, up_sigma):
    rgb, sigma, _ = forward(params, z, d, keep_cache=False)
    return float(np.sum(rgb * up_rgb) + np.sum(sigma * up_sigma))


def fd_gradient(params, z, d, up_rgb, up_sigma, h=1e-4):
    flat = params.flat()
    grad = np.empty_like(flat)
    for k in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[k] += h
        minus[k] -= h
        lp = scalar_loss(DecoderParams.from_flat(params.arch, plus, np.float64), z, d, up_rgb, up_sigma)
        lm = scalar_loss(DecoderParams.from_flat(params.arch, minus, np.float64), z, d, up_rgb, up_sigma)
        grad[k] = (lp - lm) / (2 * h)
    return grad


def brute_weights(sigma, delta):
    """Per-prefix exponential sums, no running product."""
    w = []
    for i in range(len(sigma)):
        t = math.exp(-sum(sigma[j] * delta[j] for j in range(i)))
        w.append(t * (1.0 - math.exp(-sigma[i] * delta[i])))
    return np.array(w)


def ssim_direct(a, b, win=7, c1=0.01**2, c2=0.03**2):
    """Window-by-window SSIM with plain Python sums."""
    h, w, ch = a.shape
    n = win * win
    per_channel = []
    for c in range(ch):
        vals = []
        for i in range(h - win + 1):
            for j in range(w - win + 1):
                xa = [float(a[i + di, j + dj, c]) for di in range(win) for dj in range(win)]
                xb = [float(b[i + di, j + dj, c]) for di in range(win) for dj in range(win)]
                ma, mb = sum(xa) / n, sum(xb) / n
                va = sum((x - ma) ** 2 for x in xa) / n
                vb = sum((x - mb) ** 2 for x in xb) / n
                cov = sum((x - ma) * (y - mb) for x, y in zip(xa, xb)) / n
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
        per_channel.append(sum(vals) / len(vals))
    return sum(per_channel) / ch
