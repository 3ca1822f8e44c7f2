"""Stratified ray sampling and volumetric compositing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import decoder, kernels
from .errors import ValidationError
from .geometry import Camera, Ray, image_rays
from .multiplane import FeatureMode, ReferenceSet, build_feature_matrix
from .parallel import map_chunks

FAR_DELTA = 1e10


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 64
    near: float = 2.0
    far: float = 6.0
    background: tuple = (1.0, 1.0, 1.0)
    perturb: bool = False
    last_delta: str = "bin"  # "bin": last sample gets one bin width; "inf": 1e10
    chunk_rays: int = 1024
    threads: int | None = None

    def __post_init__(self):
        if self.samples_per_ray < 1:
            raise ValidationError("samples_per_ray must be >= 1")
        if not 0.0 <= self.near < self.far:
            raise ValidationError("require 0 <= near < far")
        if self.last_delta not in ("bin", "inf"):
            raise ValidationError("last_delta must be 'bin' or 'inf'")
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))


@dataclass
class RaySampleBatch:
    t_values: np.ndarray
    deltas: np.ndarray
    colors: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        if np.any(np.diff(self.t_values) <= 0):
            raise ValidationError("t_values must be strictly ascending")
        if np.any(self.deltas <= 0):
            raise ValidationError("deltas must be positive")


@dataclass(frozen=True)
class RenderedPixel:
    color: np.ndarray
    accumulated_alpha: float


# -- sampling -----------------------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return x ^ (x >> np.uint64(31))


def ray_uniforms(seed: int, ray_ids, n: int) -> np.ndarray:
    """Counter-based U[0,1) draws, ``(len(ray_ids), n)``.

    Each ray's stream depends only on ``(seed, ray_id)``, so any chunking or
    scheduling of rays reproduces the same samples.
    """
    ray_ids = np.asarray(ray_ids, dtype=np.uint64).reshape(-1, 1)
    key = _splitmix64(np.array([seed], dtype=np.uint64))
    with np.errstate(over="ignore"):
        counters = (ray_ids * np.uint64(n) + np.arange(n, dtype=np.uint64)[None, :]) ^ key
        bits = _splitmix64(_splitmix64(counters))
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def sample_t(n_rays: int, n: int, near: float, far: float, uniforms=None) -> np.ndarray:
    """``(n_rays, n)`` depths, one per equal-width bin; midpoints if ``uniforms`` is None."""
    if n < 1:
        raise ValidationError("need at least one sample per ray")
    offsets = np.full((n_rays, n), 0.5) if uniforms is None else np.asarray(uniforms, dtype=np.float64)
    return near + (np.arange(n)[None, :] + offsets) * ((far - near) / n)


def stratified_sample(ray: Ray, n: int, rng_seed: int = 0, ray_id: int = 0, midpoint: bool = False) -> np.ndarray:
    if n < 1:
        raise ValidationError("need at least one sample per ray")
    uniforms = None if midpoint else ray_uniforms(rng_seed, [ray_id], n)
    return sample_t(1, n, ray.t_near, ray.t_far, uniforms)[0]


def sample_deltas(t: np.ndarray, near: float, far: float, last_delta: str = "bin") -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    n = t.shape[-1]
    last = FAR_DELTA if last_delta == "inf" else (far - near) / n
    tail = np.full(t.shape[:-1] + (1,), last)
    return np.concatenate([np.diff(t, axis=-1), tail], axis=-1)


# -- compositing --------------------------------------------------------------

def composite(batch: RaySampleBatch, background=(1.0, 1.0, 1.0)) -> RenderedPixel:
    """Composite one ray's samples front to back over ``background``."""
    sigma = np.ascontiguousarray(batch.sigmas, dtype=np.float64)[None]
    if np.any(sigma < 0):
        raise ValidationError("densities must be non-negative")
    rgb = np.ascontiguousarray(batch.colors, dtype=np.float64)[None]
    delta = np.ascontiguousarray(batch.deltas, dtype=np.float64)[None]
    color = np.empty((1, 3))
    weights = np.empty_like(sigma)
    kernels.composite_forward(sigma, rgb, delta, np.asarray(background, dtype=np.float64), color, weights)
    batch.weights = weights[0]
    return RenderedPixel(color[0], float(weights[0].sum()))


# -- radiance fields ----------------------------------------------------------

class MultiPlaneField:
    """Decoder bound to a reference set; the reference set is never modified."""

    def __init__(self, params: decoder.DecoderParams, refs: ReferenceSet):
        if params.arch.kind != "multiplane":
            raise ValidationError("MultiPlaneField needs a multiplane decoder")
        if refs.n != params.arch.n_refs:
            raise ValidationError(
                f"decoder was built for {params.arch.n_refs} references, got {refs.n}"
            )
        self.params = params
        self.refs = refs
        self.mode = FeatureMode(params.arch.mode)

    def query(self, points, dirs, sigma_noise=None, keep_cache=False):
        feats = build_feature_matrix(points, self.refs, self.mode, dtype=self.params.dtype)
        return decoder.forward(self.params, feats, dirs, sigma_noise, keep_cache)


class NeRFField:
    """Positional-encoding baseline: the scene lives entirely in the weights."""

    def __init__(self, params: decoder.DecoderParams):
        if params.arch.kind != "nerf":
            raise ValidationError("NeRFField needs a nerf decoder")
        self.params = params
        self.refs = None

    def query(self, points, dirs, sigma_noise=None, keep_cache=False):
        return decoder.forward(self.params, points, dirs, sigma_noise, keep_cache)


def make_field(params: decoder.DecoderParams, refs: ReferenceSet | None = None):
    if params.arch.kind == "nerf":
        return NeRFField(params)
    if refs is None:
        raise ValidationError("a multiplane decoder needs a reference set")
    return MultiPlaneField(params, refs)


@dataclass
class TraceState:
    """Everything the backward pass needs from a batched render."""

    sigma: np.ndarray
    rgb: np.ndarray
    delta: np.ndarray
    weights: np.ndarray
    background: np.ndarray
    cache: object = field(repr=False, default=None)


def trace(field_, origins, dirs, t_values, config: RenderConfig, sigma_noise=None, keep_cache=False):
    """Render a batch of rays at given sample depths.

    Returns ``(color (R, 3), acc (R,), state)``.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays, n = t_values.shape
    pts = origins[:, None, :] + t_values[..., None] * dirs[:, None, :]
    dirs_rep = np.repeat(dirs, n, axis=0)
    noise = None if sigma_noise is None else np.asarray(sigma_noise).reshape(-1)
    rgb, sigma, cache = field_.query(pts.reshape(-1, 3), dirs_rep, noise, keep_cache)
    dtype = rgb.dtype
    rgb = np.ascontiguousarray(rgb.reshape(n_rays, n, 3))
    sigma = np.ascontiguousarray(sigma.reshape(n_rays, n))
    delta = np.ascontiguousarray(sample_deltas(t_values, config.near, config.far, config.last_delta), dtype=dtype)
    background = np.asarray(config.background, dtype=np.float64)
    color = np.empty((n_rays, 3), dtype=dtype)
    weights = np.empty((n_rays, n), dtype=dtype)
    kernels.composite_forward(sigma, rgb, delta, background, color, weights)
    acc = weights.sum(axis=1)
    return color, acc, TraceState(sigma, rgb, delta, weights, background, cache)


def trace_backward(field_, state: TraceState, grad_color) -> decoder.Gradients:
    grad_color = np.ascontiguousarray(grad_color, dtype=state.rgb.dtype)
    d_sigma = np.empty_like(state.sigma)
    d_rgb = np.empty_like(state.rgb)
    kernels.composite_backward(
        state.sigma, state.rgb, state.delta, state.weights, state.background, grad_color, d_sigma, d_rgb
    )
    return decoder.backward(field_.params, state.cache, d_rgb.reshape(-1, 3), d_sigma.reshape(-1))


def render_rays(field_, origins, dirs, config: RenderConfig, seed: int = 0, ray_ids=None):
    """Render rays with per-ray sample streams; returns ``(color, acc)``."""
    n_rays = len(origins)
    if ray_ids is None:
        ray_ids = np.arange(n_rays)
    uniforms = ray_uniforms(seed, ray_ids, config.samples_per_ray) if config.perturb else None
    t = sample_t(n_rays, config.samples_per_ray, config.near, config.far, uniforms)
    color, acc, _ = trace(field_, origins, dirs, t, config)
    return color, acc


def render_ray(params, refs, ray: Ray, config: RenderConfig = RenderConfig(), seed: int = 0, ray_id: int = 0) -> RenderedPixel:
    """Render a single ray; honors ``ray.t_near``/``ray.t_far``."""
    cfg = RenderConfig(**{**config.__dict__, "near": ray.t_near, "far": ray.t_far})
    field_ = make_field(params, refs)
    color, acc = render_rays(field_, ray.origin[None], ray.direction[None], cfg, seed, [ray_id])
    return RenderedPixel(color[0].astype(np.float64), float(acc[0]))


def render_image(params, refs, camera: Camera, config: RenderConfig = RenderConfig(), seed: int = 0,
                 threads: int | None = None) -> np.ndarray:
    """Render every pixel of ``camera``; returns ``(H, W, 3)`` float64 in [0, 1].

    Rays are processed in chunks of ``config.chunk_rays``; ray ``k`` (row-major
    pixel index) always uses sample stream ``(seed, k)``.
    """
    field_ = make_field(params, refs)
    origins, dirs = image_rays(camera)
    threads = config.threads if threads is None else threads

    def work(lo, hi):
        color, _ = render_rays(field_, origins[lo:hi], dirs[lo:hi], config, seed, np.arange(lo, hi))
        return color

    parts = map_chunks(work, len(origins), config.chunk_rays, threads)
    img = np.concatenate(parts, axis=0).astype(np.float64)
    return np.clip(img, 0.0, 1.0).reshape(camera.height, camera.width, 3)
