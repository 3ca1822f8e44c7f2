"""The image-based scene representation.

A :class:`ReferenceSet` is a fixed, ordered list of posed RGB images.  A 3D
point is described to the decoder by projecting it onto every reference,
reading the bilinearly interpolated color there and appending the projected
(normalized) coordinates, plus the reference camera position when running in
generalization mode.  Nothing in this module is ever optimized.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InputDomainError, ValidationError
from .geometry import Camera, project_points


class FeatureMode(str, enum.Enum):
    STANDARD = "standard"
    GENERALIZATION = "generalization"

    @property
    def block(self) -> int:
        """Features contributed by each reference image."""
        return 8 if self is FeatureMode.GENERALIZATION else 5


@dataclass(frozen=True, eq=False)
class ReferenceImage:
    pixels: np.ndarray
    camera: Camera

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValidationError(f"reference pixels must be HxWx3, got {pixels.shape}")
        if pixels.shape[:2] != (self.camera.height, self.camera.width):
            raise ValidationError("reference image size does not match its camera")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValidationError("reference pixel values must lie in [0, 1]")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)


@dataclass(frozen=True, eq=False)
class ReferenceSet:
    """Immutable ordered collection of reference images.

    The stacked arrays used by the feature kernel are built once here and
    marked read-only.
    """

    images: tuple
    stack: np.ndarray = field(init=False, repr=False)
    w2c: np.ndarray = field(init=False, repr=False)
    positions: np.ndarray = field(init=False, repr=False)
    _stack32: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        images = tuple(self.images)
        if not images:
            raise ValidationError("a reference set needs at least one image")
        shape = images[0].pixels.shape
        focal = images[0].camera.focal
        for img in images:
            if img.pixels.shape != shape:
                raise ValidationError("all reference images must share one resolution")
            if img.camera.focal != focal:
                raise ValidationError("all reference cameras must share one focal length")
        object.__setattr__(self, "images", images)
        stack = np.stack([img.pixels for img in images])
        w2c = np.ascontiguousarray(np.stack([img.camera.world_to_camera[:3] for img in images]))
        positions = np.ascontiguousarray(np.stack([img.camera.position for img in images]))
        stack32 = stack.astype(np.float32)
        for arr in (stack, w2c, positions, stack32):
            arr.setflags(write=False)
        object.__setattr__(self, "stack", stack)
        object.__setattr__(self, "w2c", w2c)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "_stack32", stack32)

    @property
    def n(self) -> int:
        return len(self.images)

    @property
    def focal(self) -> float:
        return self.images[0].camera.focal

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx):
        return self.images[idx]

    def pixel_stack(self, dtype=np.float64) -> np.ndarray:
        return self._stack32 if np.dtype(dtype) == np.float32 else self.stack

    def fingerprint(self) -> str:
        """Content hash of pixels and poses; changes iff the representation does."""
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.stack).tobytes())
        for img in self.images:
            h.update(np.ascontiguousarray(img.camera.pose).tobytes())
        return h.hexdigest()


def sample_bilinear(image: ReferenceImage, uv) -> np.ndarray:
    """Bilinear color at continuous pixel coordinates ``uv``; black off-image."""
    uv = np.asarray(uv, dtype=np.float64)
    if uv.shape != (2,):
        raise InputDomainError("uv must be a 2-vector")
    if np.isnan(uv).any():
        raise InputDomainError("uv is NaN")
    u, v = uv
    height, width = image.pixels.shape[:2]
    if not (0.0 <= u < width and 0.0 <= v < height):
        return np.zeros(3)
    return kernels._fallback.bilinear_lookup(image.pixels, np.array([u]), np.array([v]))[0]


def feature_dim(n: int, mode: FeatureMode | str) -> int:
    return FeatureMode(mode).block * n


def build_feature_matrix(points, refs: ReferenceSet, mode: FeatureMode | str = FeatureMode.STANDARD,
                         dtype=np.float32) -> np.ndarray:
    """Decoder inputs for many points at once, shape ``(M, 5n)`` or ``(M, 8n)``."""
    mode = FeatureMode(mode)
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    out = np.empty((points.shape[0], feature_dim(refs.n, mode)), dtype=dtype)
    kernels.gather_features(
        points,
        refs.pixel_stack(dtype),
        refs.w2c,
        float(refs.focal),
        refs.positions,
        mode is FeatureMode.GENERALIZATION,
        out,
    )
    return out


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    mode: FeatureMode

    def __post_init__(self):
        if self.values.ndim != 1 or len(self.values) % self.mode.block:
            raise ValidationError("feature length does not match its mode")

    @property
    def n(self) -> int:
        return len(self.values) // self.mode.block


def build_features(x, refs: ReferenceSet, mode: FeatureMode | str = FeatureMode.STANDARD) -> FeatureVector:
    """Single-point feature construction, written directly against the geometry API.

    This path does not touch the batched kernel, so tests use it as a check
    on :func:`build_feature_matrix`.
    """
    mode = FeatureMode(mode)
    x = np.asarray(x, dtype=np.float64)
    parts = []
    for img in refs.images:
        uv, inside, uv_norm = project_points(x[None], img.camera)
        rgb = sample_bilinear(img, uv[0]) if inside[0] else np.zeros(3)
        parts.extend([rgb, uv_norm[0]])
        if mode is FeatureMode.GENERALIZATION:
            parts.append(img.camera.position)
    return FeatureVector(np.concatenate(parts), mode)


def mix_references(a: ReferenceSet, b: ReferenceSet, k: int) -> ReferenceSet:
    """First ``k`` references of ``a`` followed by the last ``n - k`` of ``b``."""
    if a.n != b.n:
        raise ValidationError(f"cannot mix reference sets of sizes {a.n} and {b.n}")
    if not 0 <= k <= a.n:
        raise ValidationError(f"k must lie in [0, {a.n}], got {k}")
    return ReferenceSet(a.images[:k] + b.images[k:])
