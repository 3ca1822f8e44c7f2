import os
import subprocess
import sys

import numpy as np
import pytest

from mpnerf import kernels
from mpnerf.geometry import orbit_poses, invert_pose

BACKENDS = kernels.available_backends()
needs_compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")


def gather_inputs(rng, n_refs=4, m=200, size=10, dtype=np.float32):
    poses = orbit_poses(n_refs, radius=4.0, elevation_deg=30.0)
    w2c = np.stack([invert_pose(p)[:3] for p in poses])
    images = rng.random((n_refs, size, size + 3, 3)).astype(dtype)
    pts = rng.uniform(-2, 2, (m, 3))
    return pts, images, w2c, 12.0, np.stack([p[:3, 3] for p in poses])


def run_gather(mod, args, gen, dtype):
    pts, images, w2c, focal, pos = args
    out = np.empty((len(pts), len(images) * (8 if gen else 5)), dtype=dtype)
    mod.gather_features(pts, images, w2c, focal, pos, gen, out)
    return out


def composite_inputs(rng, r=5, n=16, dtype=np.float64):
    sigma = rng.uniform(0, 4, (r, n)).astype(dtype)
    sigma[0, :] = 0.0
    rgb = rng.random((r, n, 3)).astype(dtype)
    delta = rng.uniform(0.02, 0.3, (r, n)).astype(dtype)
    return sigma, rgb, delta, np.array([1.0, 0.5, 0.2])


def run_forward(mod, sigma, rgb, delta, bg):
    color = np.empty((sigma.shape[0], 3), dtype=sigma.dtype)
    weights = np.empty_like(sigma)
    mod.composite_forward(sigma, rgb, delta, bg, color, weights)
    return color, weights


def run_backward(mod, sigma, rgb, delta, bg, weights, grad):
    ds, dr = np.empty_like(sigma), np.empty_like(rgb)
    mod.composite_backward(sigma, rgb, delta, weights, bg, grad, ds, dr)
    return ds, dr


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("gen", [False, True])
def test_gather_parity(rng, dtype, gen):
    args = gather_inputs(rng, dtype=dtype)
    a = run_gather(BACKENDS["numpy"], args, gen, dtype)
    b = run_gather(BACKENDS["cython"], args, gen, dtype)
    tol = 1e-6 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(a, b, atol=tol)


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_composite_parity(rng, dtype):
    sigma, rgb, delta, bg = composite_inputs(rng, dtype=dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-13
    ca, wa = run_forward(BACKENDS["numpy"], sigma, rgb, delta, bg)
    cb, wb = run_forward(BACKENDS["cython"], sigma, rgb, delta, bg)
    np.testing.assert_allclose(ca, cb, atol=tol)
    np.testing.assert_allclose(wa, wb, atol=tol)
    grad = rng.normal(size=(sigma.shape[0], 3)).astype(dtype)
    for x, y in zip(run_backward(BACKENDS["numpy"], sigma, rgb, delta, bg, wa, grad),
                    run_backward(BACKENDS["cython"], sigma, rgb, delta, bg, wb, grad)):
        np.testing.assert_allclose(x, y, atol=tol * 10)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_composite_backward_finite_difference(rng, name):
    mod = BACKENDS[name]
    sigma, rgb, delta, bg = composite_inputs(rng, r=2, n=6)
    grad = rng.normal(size=(2, 3))
    _, weights = run_forward(mod, sigma, rgb, delta, bg)
    d_sigma, d_rgb = run_backward(mod, sigma, rgb, delta, bg, weights, grad)

    def loss(s, c):
        return float(np.sum(run_forward(mod, s, c, delta, bg)[0] * grad))

    h = 1e-6
    for idx in np.ndindex(sigma.shape):
        sp, sm = sigma.copy(), sigma.copy()
        sp[idx] += h
        sm[idx] -= h
        assert d_sigma[idx] == pytest.approx((loss(sp, rgb) - loss(sm, rgb)) / (2 * h), abs=1e-7)
    for idx in np.ndindex(rgb.shape):
        cp, cm = rgb.copy(), rgb.copy()
        cp[idx] += h
        cm[idx] -= h
        assert d_rgb[idx] == pytest.approx((loss(sigma, cp) - loss(sigma, cm)) / (2 * h), abs=1e-7)


def test_backward_survives_opaque_prefix(rng):
    # transmittance underflows to zero after the first sample
    for mod in BACKENDS.values():
        sigma = np.array([[1e4, 1.0, 2.0]])
        rgb = rng.random((1, 3, 3))
        delta = np.full((1, 3), 0.1)
        _, w = run_forward(mod, sigma, rgb, delta, np.ones(3))
        ds, dr = run_backward(mod, sigma, rgb, delta, np.ones(3), w, np.ones((1, 3)))
        assert np.all(np.isfinite(ds)) and np.all(np.isfinite(dr))


def test_env_var_forces_fallback():
    code = "from mpnerf import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, MPNERF_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
