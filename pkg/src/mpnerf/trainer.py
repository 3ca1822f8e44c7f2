"""Loss, Adam, view splitting and the training loops.

Only decoder weights are optimized.  Reference images enter the loop through
read-only arrays inside :class:`~mpnerf.multiplane.ReferenceSet` and no
gradient is ever formed for them.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import decoder
from .dataset import SceneViews, composite_alpha
from .errors import NumericError, ValidationError
from .geometry import image_rays
from .multiplane import FeatureMode, ReferenceImage, ReferenceSet
from .parallel import chunk_bounds, map_chunks
from .renderer import RenderConfig, make_field, sample_t, trace, trace_backward

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    lr_final: float = 5e-5
    batch_rays: int = 1024
    iterations: int = 20000
    samples_per_ray: int = 64
    sigma_noise_std: float = 0.0
    seed: int = 0
    mode: str = FeatureMode.STANDARD.value
    n_refs: int = 12
    split_strategy: str = "azimuth_stratified"
    hidden: tuple = (256,) * 8
    color_hidden: int = 128
    dir_freqs: int = 4
    uv_freqs: int = 0
    kind: str = "multiplane"
    near: float = 2.0
    far: float = 6.0
    background: tuple = (1.0, 1.0, 1.0)
    last_delta: str = "bin"
    dtype: str = "float32"
    shard_rays: int = 256
    objects_per_batch: int = 4
    threads: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))
        object.__setattr__(self, "mode", FeatureMode(self.mode).value)
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        for name in ("learning_rate", "lr_final", "batch_rays", "samples_per_ray", "shard_rays", "n_refs"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.sigma_noise_std < 0:
            raise ValidationError("sigma_noise_std must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")

    def architecture(self) -> decoder.Architecture:
        return decoder.Architecture(
            kind=self.kind,
            n_refs=self.n_refs,
            mode=self.mode,
            hidden=self.hidden,
            color_hidden=self.color_hidden,
            dir_freqs=self.dir_freqs,
            uv_freqs=self.uv_freqs,
        )

    def render_config(self, perturb: bool = False) -> RenderConfig:
        return RenderConfig(
            samples_per_ray=self.samples_per_ray,
            near=self.near,
            far=self.far,
            background=self.background,
            perturb=perturb,
            last_delta=self.last_delta,
            chunk_rays=self.shard_rays,
            threads=self.threads,
        )

    def lr_at(self, step: int) -> float:
        """Exponential decay from ``learning_rate`` to ``lr_final`` over the run."""
        frac = min(step / self.iterations, 1.0)
        return self.learning_rate * (self.lr_final / self.learning_rate) ** frac


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params: decoder.DecoderParams) -> "AdamState":
        tensors = params.tensors()
        return cls([np.zeros_like(t) for t in tensors], [np.zeros_like(t) for t in tensors], 0)


def mse_loss(pred, truth) -> float:
    """Mean over rays of the squared color error summed over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValidationError(f"prediction shape {pred.shape} != target shape {truth.shape}")
    if pred.ndim == 1:
        pred, truth = pred[None], truth[None]
    return float(np.sum((pred - truth) ** 2) / pred.shape[0])


def adam_step(params: decoder.DecoderParams, grads: decoder.Gradients, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    p_tensors = params.tensors()
    g_tensors = grads.tensors()
    if len(p_tensors) != len(g_tensors) or len(state.m) != len(p_tensors):
        raise ValidationError("gradient/optimizer state does not match the parameters")
    for p, g, m in zip(p_tensors, g_tensors, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValidationError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    step = state.step + 1
    bc1 = 1.0 - ADAM_BETA1**step
    bc2 = 1.0 - ADAM_BETA2**step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_tensors, g_tensors, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        upd = (lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)).astype(p.dtype)
        new_p.append(p - upd)
        new_m.append(m.astype(p.dtype))
        new_v.append(v.astype(p.dtype))
    return decoder.DecoderParams.from_tensors(params.arch, new_p), AdamState(new_m, new_v, step)


# -- view splitting ---------------------------------------------------------------

def _azimuths(cameras) -> np.ndarray:
    pos = np.stack([c.position for c in cameras])
    return np.arctan2(pos[:, 1], pos[:, 0])


def split_indices(cameras, n_refs: int, strategy: str = "azimuth_stratified") -> tuple[list, list]:
    """Indices of reference views (in representation order) and training views."""
    total = len(cameras)
    if not 1 <= n_refs < total:
        raise ValidationError(f"n_refs must lie in [1, {total - 1}] for {total} views, got {n_refs}")
    if strategy == "first_n":
        refs = list(range(n_refs))
    elif strategy == "azimuth_stratified":
        az = _azimuths(cameras)
        targets = az[0] + 2.0 * np.pi * np.arange(n_refs) / n_refs
        free = np.ones(total, dtype=bool)
        refs = []
        for target in targets:
            gap = np.abs(np.angle(np.exp(1j * (az - target))))
            gap[~free] = np.inf
            pick = int(np.argmin(gap))
            free[pick] = False
            refs.append(pick)
    else:
        raise ValidationError(f"unknown split strategy {strategy!r}")
    chosen = set(refs)
    return refs, [i for i in range(total) if i not in chosen]


def reference_set(views: SceneViews, indices, background=(1.0, 1.0, 1.0)) -> ReferenceSet:
    return ReferenceSet(tuple(
        ReferenceImage(composite_alpha(views.views[i].rgba, background), views.views[i].camera)
        for i in indices
    ))


def split_views(views: SceneViews, n_refs: int, strategy: str = "azimuth_stratified",
                background=(1.0, 1.0, 1.0)) -> tuple[ReferenceSet, SceneViews]:
    ref_idx, train_idx = split_indices(views.cameras, n_refs, strategy)
    return reference_set(views, ref_idx, background), views.subset(train_idx)


# -- ray banks --------------------------------------------------------------------

@dataclass
class RayBank:
    """Every pixel ray of a set of training views with its target color."""

    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray

    def __len__(self):
        return len(self.origins)

    @classmethod
    def from_views(cls, views: SceneViews, background=(1.0, 1.0, 1.0)) -> "RayBank":
        if len(views) == 0:
            raise ValidationError("training set is empty")
        o, d, c = [], [], []
        for v in views.views:
            origins, dirs = image_rays(v.camera)
            o.append(origins)
            d.append(dirs)
            c.append(composite_alpha(v.rgba, background).reshape(-1, 3))
        return cls(np.concatenate(o), np.concatenate(d), np.concatenate(c))

    def take(self, idx) -> "RayBank":
        return RayBank(self.origins[idx], self.dirs[idx], self.colors[idx])


# -- training ---------------------------------------------------------------------

@dataclass
class _Piece:
    field: object
    origins: np.ndarray
    dirs: np.ndarray
    t: np.ndarray
    target: np.ndarray
    noise: np.ndarray | None


def _draw_piece(field_, bank: RayBank, n_rays: int, config: TrainConfig, rng) -> _Piece:
    idx = rng.integers(0, len(bank), size=n_rays)
    uniforms = rng.random((n_rays, config.samples_per_ray))
    t = sample_t(n_rays, config.samples_per_ray, config.near, config.far, uniforms)
    noise = None
    if config.sigma_noise_std > 0:
        noise = rng.normal(0.0, config.sigma_noise_std, size=(n_rays, config.samples_per_ray))
    return _Piece(field_, bank.origins[idx], bank.dirs[idx], t, bank.colors[idx], noise)


def _batch_gradients(params, pieces: list, config: TrainConfig):
    """Loss and summed gradients over all pieces, reduced in a fixed order."""
    total_rays = sum(len(p.origins) for p in pieces)
    rcfg = config.render_config()
    jobs = []
    for p in pieces:
        for lo, hi in chunk_bounds(len(p.origins), config.shard_rays):
            jobs.append((p, lo, hi))

    def work(lo, hi):
        out = []
        for p, a, b in jobs[lo:hi]:
            noise = None if p.noise is None else p.noise[a:b]
            color, _, state = trace(p.field, p.origins[a:b], p.dirs[a:b], p.t[a:b], rcfg, noise, keep_cache=True)
            diff = color.astype(np.float64) - p.target[a:b]
            sq = float(np.sum(diff * diff))
            grads = trace_backward(p.field, state, 2.0 * diff / total_rays)
            out.append((sq, grads))
        return out

    results = [r for part in map_chunks(work, len(jobs), 1, config.threads) for r in part]
    loss = sum(sq for sq, _ in results) / total_rays
    grads = results[0][1]
    for _, g in results[1:]:
        grads = grads + g
    return loss, grads


def train_step(params, state: AdamState, refs: ReferenceSet | None, bank: RayBank, config: TrainConfig,
               rng, step: int | None = None):
    """Sample a ray batch, render, backpropagate and apply Adam.

    Returns ``(params, state, loss)``.
    """
    if len(bank) == 0:
        raise ValidationError("training set is empty")
    step = state.step if step is None else step
    piece = _draw_piece(make_field(params, refs), bank, config.batch_rays, config, rng)
    loss, grads = _batch_gradients(params, [piece], config)
    if not np.isfinite(loss):
        raise NumericError(f"loss became {loss} at step {step}")
    params, state = adam_step(params, grads, state, config.lr_at(step))
    return params, state, loss


@dataclass
class TrainResult:
    params: decoder.DecoderParams
    state: AdamState
    history: list = field(default_factory=list)  # (step, loss, lr)
    timings: list = field(default_factory=list)  # (step, seconds since start)
    refs: object = None


def _loop(params, config: TrainConfig, draw, on_step=None, log_every: int = 100) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(params)
    result = TrainResult(params, state)
    start = time.perf_counter()
    for step in range(config.iterations):
        pieces = draw(params, rng)
        loss, grads = _batch_gradients(params, pieces, config)
        if not np.isfinite(loss):
            raise NumericError(f"loss became {loss} at step {step}")
        lr = config.lr_at(step)
        params, state = adam_step(params, grads, state, lr)
        result.history.append((step + 1, loss, lr))
        result.timings.append((step + 1, time.perf_counter() - start))
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.5f lr %.2e", step + 1, loss, lr)
        if on_step is not None:
            on_step(step + 1, params, state)
    result.params, result.state = params, state
    return result


def fit_scene(views: SceneViews, config: TrainConfig, on_step=None, init=None) -> TrainResult:
    """Train a decoder on one scene: split references, then optimize on the rest."""
    params = init if init is not None else decoder.init_params(config.architecture(), config.seed, config.dtype)
    if config.kind == "nerf":
        refs, train_views = None, views
    else:
        refs, train_views = split_views(views, config.n_refs, config.split_strategy, config.background)
    bank = RayBank.from_views(train_views, config.background)

    def draw(p, rng):
        return [_draw_piece(make_field(p, refs), bank, config.batch_rays, config, rng)]

    result = _loop(params, config, draw, on_step)
    result.refs = refs
    return result


def object_batch_plan(n_objects: int, config: TrainConfig, rng) -> list[tuple[int, int]]:
    """Which objects a step draws from and how many rays each gets."""
    k = max(2, min(config.objects_per_batch, n_objects))
    chosen = rng.choice(n_objects, size=k, replace=False)
    base, extra = divmod(config.batch_rays, k)
    return [(int(o), base + (1 if i < extra else 0)) for i, o in enumerate(chosen)]


def train_multi_object(objects: list, config: TrainConfig, on_step=None) -> TrainResult:
    """Train one decoder across many objects, each with its own reference set.

    ``objects`` is a list of :class:`SceneViews`.  Every step draws rays from
    at least two distinct objects.
    """
    if FeatureMode(config.mode) is not FeatureMode.GENERALIZATION:
        raise ValidationError("multi-object training requires generalization mode")
    if len(objects) < 2:
        raise ValidationError("multi-object training needs at least two objects")
    splits = [split_views(o, config.n_refs, config.split_strategy, config.background) for o in objects]
    banks = [RayBank.from_views(train, config.background) for _, train in splits]
    params = decoder.init_params(config.architecture(), config.seed, config.dtype)

    def draw(p, rng):
        pieces = []
        for obj, count in object_batch_plan(len(objects), config, rng):
            pieces.append(_draw_piece(make_field(p, splits[obj][0]), banks[obj], count, config, rng))
        return pieces

    result = _loop(params, config, draw, on_step)
    result.refs = [refs for refs, _ in splits]
    return result


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
