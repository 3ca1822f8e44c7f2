"""Small MLP decoder ``(features, view direction) -> (rgb, sigma)``.

The network follows the vanilla NeRF head layout: a ReLU trunk, a softplus
density head off the trunk, and a color branch that receives a linear
feature projection of the trunk concatenated with the encoded viewing
direction.  Gradients are computed by hand; only the decoder weights are
differentiated, never the features.

Two input front-ends share the same body:

* ``kind="multiplane"`` consumes reference-image features (5n or 8n values);
* ``kind="nerf"`` consumes a 3D position encoded with 10 frequencies
  (the vanilla NeRF baseline).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import UsageError, ValidationError
from .multiplane import FeatureMode

CHECKPOINT_MAGIC = b"MPNERFCK"
CHECKPOINT_VERSION = 1


def positional_encode(v, n_freq: int) -> np.ndarray:
    """``sin``/``cos`` features at frequencies ``2^k * pi``, ``k < n_freq``.

    Order is component-major, frequency-minor, with sin before cos:
    ``[sin(pi v0), cos(pi v0), sin(2pi v0), cos(2pi v0), ..., sin(pi v1), ...]``.
    Works on any leading batch shape.
    """
    if n_freq < 0:
        raise ValidationError("n_freq must be >= 0")
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    angles = v[..., :, None] * freqs.astype(v.dtype)  # (..., d, F)
    enc = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (..., d, F, 2)
    return enc.reshape(v.shape[:-1] + (v.shape[-1] * 2 * n_freq,))


def softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class Architecture:
    kind: str = "multiplane"
    n_refs: int = 12
    mode: str = FeatureMode.STANDARD.value
    hidden: tuple = (256,) * 8
    color_hidden: int = 128
    dir_freqs: int = 4
    pos_freqs: int = 10
    uv_freqs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "mode", FeatureMode(self.mode).value)
        if self.kind not in ("multiplane", "nerf"):
            raise ValidationError(f"unknown decoder kind {self.kind!r}")
        if not self.hidden or min(self.hidden) <= 0 or self.color_hidden <= 0:
            raise ValidationError("layer widths must be positive and at least one hidden layer is needed")
        if self.kind == "multiplane" and self.n_refs < 1:
            raise ValidationError("n_refs must be >= 1")
        if min(self.dir_freqs, self.pos_freqs, self.uv_freqs) < 0:
            raise ValidationError("frequency counts must be >= 0")

    @property
    def feature_dim(self) -> int:
        """Length of the raw feature vector the caller supplies."""
        if self.kind == "nerf":
            return 3
        return FeatureMode(self.mode).block * self.n_refs

    @property
    def input_dim(self) -> int:
        if self.kind == "nerf":
            return 3 * 2 * self.pos_freqs
        return self.feature_dim + 2 * self.n_refs * 2 * self.uv_freqs

    @property
    def dir_dim(self) -> int:
        return 3 * 2 * self.dir_freqs

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per dense layer, in storage order."""
        shapes = []
        prev = self.input_dim
        for width in self.hidden:
            shapes.append((prev, width))
            prev = width
        top = self.hidden[-1]
        shapes.append((top, 1))  # density head
        shapes.append((top, top))  # feature projection
        shapes.append((top + self.dir_dim, self.color_hidden))
        shapes.append((self.color_hidden, 3))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


@dataclass
class DecoderParams:
    arch: Architecture
    layers: list

    def __post_init__(self):
        shapes = self.arch.layer_shapes()
        if len(self.layers) != len(shapes):
            raise ValidationError("layer count does not match architecture")
        for (w, b), (fan_in, fan_out) in zip(self.layers, shapes):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValidationError(
                    f"layer shape {w.shape}/{b.shape} does not chain as ({fan_in}, {fan_out})"
                )

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def count(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def tensors(self) -> list[np.ndarray]:
        return [t for pair in self.layers for t in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    @classmethod
    def from_tensors(cls, arch: Architecture, tensors) -> "DecoderParams":
        tensors = list(tensors)
        return cls(arch, [(tensors[i], tensors[i + 1]) for i in range(0, len(tensors), 2)])

    @classmethod
    def from_flat(cls, arch: Architecture, vec, dtype=np.float32) -> "DecoderParams":
        vec = np.asarray(vec)
        layers, pos = [], 0
        for fan_in, fan_out in arch.layer_shapes():
            w = vec[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out).astype(dtype)
            pos += fan_in * fan_out
            b = vec[pos : pos + fan_out].astype(dtype)
            pos += fan_out
            layers.append((w, b))
        if pos != vec.size:
            raise ValidationError(f"flat parameter vector has {vec.size} entries, expected {pos}")
        return cls(arch, layers)

    def astype(self, dtype) -> "DecoderParams":
        return DecoderParams(self.arch, [(w.astype(dtype), b.astype(dtype)) for w, b in self.layers])

    def copy(self) -> "DecoderParams":
        return self.astype(self.dtype)


@dataclass
class Gradients:
    """Per-tensor gradient accumulators, congruent with :class:`DecoderParams`."""

    layers: list

    def tensors(self) -> list[np.ndarray]:
        return [t for pair in self.layers for t in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([(w1 + w2, b1 + b2) for (w1, b1), (w2, b2) in zip(self.layers, other.layers)])

    def scale(self, factor) -> "Gradients":
        return Gradients([(w * factor, b * factor) for w, b in self.layers])

    @classmethod
    def zeros_like(cls, params: DecoderParams) -> "Gradients":
        return cls([(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers])


@dataclass(frozen=True)
class RadianceOutput:
    color: np.ndarray
    sigma: float


def init_params(arch: Architecture, seed: int = 0, dtype=np.float32) -> DecoderParams:
    """He-uniform weights, zero biases; drawn in float64 then cast."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in arch.layer_shapes():
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        layers.append((w, np.zeros(fan_out, dtype=dtype)))
    return DecoderParams(arch, layers)


def prepare_input(arch: Architecture, raw) -> np.ndarray:
    """Map raw per-sample features (or positions) to the first-layer input."""
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.shape[1] != arch.feature_dim:
        raise ValidationError(
            f"decoder expects inputs of width {arch.feature_dim}, got shape {raw.shape}"
        )
    if arch.kind == "nerf":
        return positional_encode(raw, arch.pos_freqs)
    if arch.uv_freqs:
        block = FeatureMode(arch.mode).block
        cols = [k * block + c for k in range(arch.n_refs) for c in (3, 4)]
        return np.concatenate([raw, positional_encode(raw[:, cols], arch.uv_freqs)], axis=1)
    return raw


@dataclass
class ForwardCache:
    arch: Architecture
    x0: np.ndarray
    trunk: list = field(default_factory=list)  # post-ReLU activations
    s_pre: np.ndarray | None = None
    color_in: np.ndarray | None = None
    c_hidden: np.ndarray | None = None
    rgb: np.ndarray | None = None


def forward(params: DecoderParams, raw, dirs, sigma_noise=None, keep_cache: bool = True):
    """Batched forward pass.

    Args:
        params: decoder weights; their dtype sets the compute precision.
        raw: ``(M, feature_dim)`` features (multiplane) or positions (nerf).
        dirs: ``(M, 3)`` unit viewing directions.
        sigma_noise: optional ``(M,)`` additive noise on the density pre-activation.

    Returns:
        ``(rgb (M, 3), sigma (M,), cache)``; cache is None when not kept.
    """
    arch = params.arch
    dtype = params.dtype
    dirs = np.asarray(dirs)
    if dirs.ndim != 2 or dirs.shape[1] != 3 or dirs.shape[0] != np.shape(raw)[0]:
        raise ValidationError("dirs must be (M, 3) matching the inputs")
    x0 = np.asarray(prepare_input(arch, raw), dtype=dtype)
    dir_enc = positional_encode(dirs.astype(dtype), arch.dir_freqs)

    n_trunk = len(arch.hidden)
    h = x0
    trunk = []
    for w, b in params.layers[:n_trunk]:
        h = np.maximum(h @ w + b, 0)
        trunk.append(h)
    ws, bs = params.layers[n_trunk]
    wf, bf = params.layers[n_trunk + 1]
    wc, bc = params.layers[n_trunk + 2]
    wo, bo = params.layers[n_trunk + 3]

    s_pre = (h @ ws + bs)[:, 0]
    if sigma_noise is not None:
        s_pre = s_pre + np.asarray(sigma_noise, dtype=dtype)
    sigma = softplus(s_pre)
    feat = h @ wf + bf
    color_in = np.concatenate([feat, dir_enc], axis=1)
    c_hidden = np.maximum(color_in @ wc + bc, 0)
    rgb = sigmoid(c_hidden @ wo + bo)

    cache = None
    if keep_cache:
        cache = ForwardCache(arch, x0, trunk, s_pre, color_in, c_hidden, rgb)
    return rgb, sigma, cache


def backward(params: DecoderParams, cache: ForwardCache | None, d_rgb, d_sigma) -> Gradients:
    """Parameter gradients for upstream ``d_rgb (M, 3)`` and ``d_sigma (M,)``."""
    if cache is None or cache.s_pre is None:
        raise UsageError("backward called without a cached forward pass")
    if cache.arch != params.arch:
        raise UsageError("forward cache belongs to a different architecture")
    dtype = params.dtype
    arch = params.arch
    n_trunk = len(arch.hidden)
    top = arch.hidden[-1]
    ws, _ = params.layers[n_trunk]
    wf, _ = params.layers[n_trunk + 1]
    wc, _ = params.layers[n_trunk + 2]
    wo, _ = params.layers[n_trunk + 3]
    d_rgb = np.asarray(d_rgb, dtype=dtype)
    d_sigma = np.asarray(d_sigma, dtype=dtype)

    rgb = cache.rgb
    d_o = d_rgb * rgb * (1 - rgb)
    g_wo = cache.c_hidden.T @ d_o
    g_bo = d_o.sum(axis=0)
    d_ch = (d_o @ wo.T) * (cache.c_hidden > 0)
    g_wc = cache.color_in.T @ d_ch
    g_bc = d_ch.sum(axis=0)
    d_feat = (d_ch @ wc.T)[:, :top]

    h = cache.trunk[-1]
    g_wf = h.T @ d_feat
    g_bf = d_feat.sum(axis=0)
    d_s = (d_sigma * sigmoid(cache.s_pre))[:, None]
    g_ws = h.T @ d_s
    g_bs = d_s[:, 0].sum(axis=0, keepdims=True)
    d_h = d_feat @ wf.T + d_s @ ws.T

    trunk_grads = []
    for idx in range(n_trunk - 1, -1, -1):
        w, _ = params.layers[idx]
        d_pre = d_h * (cache.trunk[idx] > 0)
        below = cache.trunk[idx - 1] if idx > 0 else cache.x0
        trunk_grads.append((below.T @ d_pre, d_pre.sum(axis=0)))
        if idx > 0:
            d_h = d_pre @ w.T
    trunk_grads.reverse()
    return Gradients(trunk_grads + [(g_ws, g_bs), (g_wf, g_bf), (g_wc, g_bc), (g_wo, g_bo)])


def decoder_forward(params: DecoderParams, z, direction) -> RadianceOutput:
    """Single-sample forward pass for a multiplane decoder."""
    if params.arch.kind != "multiplane":
        raise ValidationError("decoder_forward needs a multiplane architecture")
    values = getattr(z, "values", z)
    rgb, sigma, _ = forward(params, np.asarray(values)[None], np.asarray(direction)[None], keep_cache=False)
    return RadianceOutput(rgb[0], float(sigma[0]))


def baseline_forward(params: DecoderParams, x, direction) -> RadianceOutput:
    """Single-sample forward pass for the positional-encoding NeRF baseline."""
    if params.arch.kind != "nerf":
        raise ValidationError("baseline_forward needs a nerf architecture")
    rgb, sigma, _ = forward(params, np.asarray(x)[None], np.asarray(direction)[None], keep_cache=False)
    return RadianceOutput(rgb[0], float(sigma[0]))


def decoder_backward(params: DecoderParams, cache: ForwardCache | None, upstream) -> Gradients:
    """Backward for the single-sample API; ``upstream`` is ``(d_color (3,), d_sigma)``."""
    d_color, d_sigma = upstream
    return backward(params, cache, np.asarray(d_color)[None], np.atleast_1d(d_sigma))


def default_architecture(n_refs: int = 12, mode: FeatureMode | str = FeatureMode.STANDARD) -> Architecture:
    return Architecture(kind="multiplane", n_refs=n_refs, mode=FeatureMode(mode).value)


def baseline_architecture() -> Architecture:
    return Architecture(kind="nerf")


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, params: DecoderParams, step: int = 0, extra: dict | None = None) -> None:
    """Write a versioned binary checkpoint.

    Layout: magic, u32 version, u32 header length, UTF-8 JSON header, then
    every tensor as little-endian raw bytes in storage order.  The output is a
    pure function of the arguments.
    """
    tensors = params.tensors()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": params.arch.to_dict(),
        "dtype": np.dtype(params.dtype).str.lstrip("<>|="),
        "shapes": [list(t.shape) for t in tensors],
        "step": int(step),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    le = np.dtype(params.dtype).newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype=le).tobytes())


def load_checkpoint(path, expect: Architecture | None = None):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns ``(params, step, extra)``.  Raises ValidationError when shapes do
    not match the stored architecture or ``expect``.
    """
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValidationError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[pos : pos + hlen].decode())
    pos += hlen
    arch = Architecture.from_dict(header["architecture"])
    if expect is not None and arch != expect:
        raise ValidationError(f"{path}: checkpoint architecture {arch} does not match {expect}")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    expected_shapes = [list(s) for pair in arch.layer_shapes() for s in (pair, (pair[1],))]
    if header["shapes"] != expected_shapes:
        raise ValidationError(f"{path}: stored tensor shapes do not match the architecture")
    tensors = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape)
        tensors.append(arr.astype(dtype.newbyteorder("=")))
        pos += count * dtype.itemsize
    if pos != len(data):
        raise ValidationError(f"{path}: trailing bytes after the last tensor")
    return DecoderParams.from_tensors(arch, tensors), header["step"], header["extra"]
