"""Loading posed image sets from disk, and a bundled toy-scene generator.

Single scenes use the NeRF-synthetic layout::

    root/transforms_{train,val,test}.json
    root/train/r_0.png ...

Multi-object sets use one directory per class::

    root/<class>/manifest.json        {"class": ..., "train": [ids], "test": [ids]}
    root/<class>/<id>/transforms.json (same schema, every frame listed)
    root/<class>/<id>/r_0.png ...
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, ValidationError
from .geometry import Camera, check_rigid, look_at

log = logging.getLogger(__name__)

VIEWS_PER_OBJECT = 50
LEGO_CAMERA_ANGLE_X = 0.6911112070083618


@dataclass(frozen=True, eq=False)
class View:
    rgba: np.ndarray  # (H, W, 4) float64 in [0, 1]
    camera: Camera
    file_path: str = ""


@dataclass
class SceneViews:
    views: list
    split: str
    camera_angle_x: float
    root: str = ""

    def __post_init__(self):
        if self.views:
            shape = self.views[0].rgba.shape
            if any(v.rgba.shape != shape for v in self.views):
                raise ValidationError("all views of a scene must share one resolution")

    def __len__(self):
        return len(self.views)

    @property
    def cameras(self) -> list:
        return [v.camera for v in self.views]

    def images(self, background=(1.0, 1.0, 1.0)) -> np.ndarray:
        """All views composited over ``background``, ``(V, H, W, 3)``."""
        return np.stack([composite_alpha(v.rgba, background) for v in self.views])

    def subset(self, indices) -> "SceneViews":
        return SceneViews([self.views[i] for i in indices], self.split, self.camera_angle_x, self.root)


@dataclass
class MultiObjectDataset:
    class_label: str
    split: str
    objects: list = field(default_factory=list)  # (object_id, SceneViews)

    @property
    def object_ids(self) -> list:
        return [oid for oid, _ in self.objects]


# -- image utilities ------------------------------------------------------------

def composite_alpha(rgba, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    rgba = np.asarray(rgba, dtype=np.float64)
    if rgba.shape[-1] == 3:
        return rgba.copy()
    alpha = rgba[..., 3:4]
    return alpha * rgba[..., :3] + (1.0 - alpha) * np.asarray(background, dtype=np.float64)


def downsample_box(image, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor x factor`` blocks."""
    if factor == 1:
        return np.asarray(image, dtype=np.float64).copy()
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise ValidationError(f"image {w}x{h} is not divisible by downsample factor {factor}")
    return image.reshape(h // factor, factor, w // factor, factor, *image.shape[2:]).mean(axis=(1, 3))


def load_png(path) -> np.ndarray:
    """8-bit PNG as float64 in [0, 1]; RGB or RGBA channel count preserved."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA"):
                im = im.convert("RGBA" if "A" in im.getbands() else "RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise DatasetError(f"missing image file {path}") from None
    except OSError as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from None
    return arr.astype(np.float64) / 255.0


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image) -> None:
    """Write an RGB or RGBA float image as 8-bit PNG with values ``round(255 c)``."""
    arr = to_uint8(image)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGBA" if arr.shape[-1] == 4 else "RGB").save(path, format="PNG")


# -- loaders --------------------------------------------------------------------

def focal_from_angle(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


def _read_json(path: Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON ({exc})") from None


def _resolve_image(base: Path, file_path: str) -> Path:
    p = base / file_path
    if p.suffix.lower() != ".png":
        png = p.with_name(p.name + ".png")
        if png.exists() or not p.exists():
            return png
    return p


def _parse_views(meta: dict, json_path: Path, downsample: int = 1) -> tuple[list, float]:
    if "camera_angle_x" not in meta:
        raise DatasetError(f"{json_path}: missing field 'camera_angle_x'")
    try:
        angle = float(meta["camera_angle_x"])
    except (TypeError, ValueError):
        raise DatasetError(f"{json_path}: field 'camera_angle_x' is not a number") from None
    frames = meta.get("frames")
    if not isinstance(frames, list):
        raise DatasetError(f"{json_path}: missing or malformed field 'frames'")
    if not frames:
        raise ValidationError(f"{json_path}: 'frames' is empty")
    views = []
    for idx, frame in enumerate(frames):
        for key in ("file_path", "transform_matrix"):
            if key not in frame:
                raise DatasetError(f"{json_path}: frames[{idx}] missing field '{key}'")
        try:
            pose = np.asarray(frame["transform_matrix"], dtype=np.float64)
        except (TypeError, ValueError):
            raise DatasetError(f"{json_path}: frames[{idx}].transform_matrix is not numeric") from None
        if pose.shape != (4, 4):
            raise DatasetError(f"{json_path}: frames[{idx}].transform_matrix must be 4x4")
        try:
            pose = check_rigid(pose, tol=1e-4)
        except ValidationError as exc:
            raise ValidationError(f"{json_path}: frames[{idx}].transform_matrix: {exc}") from None
        # re-orthonormalize poses stored with limited decimal precision
        u, _, vt = np.linalg.svd(pose[:3, :3])
        pose[:3, :3] = u @ vt
        img = load_png(_resolve_image(json_path.parent, frame["file_path"]))
        if img.shape[-1] == 3:
            img = np.concatenate([img, np.ones(img.shape[:2] + (1,))], axis=-1)
        if downsample > 1:
            img = downsample_box(img, downsample)
        h, w = img.shape[:2]
        cam = Camera(w, h, focal_from_angle(w, angle), pose)
        views.append(View(img, cam, str(frame["file_path"])))
    return views, angle


def load_nerf_synthetic(root_dir, split: str = "train", downsample: int = 1) -> SceneViews:
    root = Path(root_dir)
    json_path = root / f"transforms_{split}.json"
    views, angle = _parse_views(_read_json(json_path), json_path, downsample)
    return SceneViews(views, split, angle, str(root))


def load_object(obj_dir, downsample: int = 1) -> SceneViews:
    json_path = Path(obj_dir) / "transforms.json"
    views, angle = _parse_views(_read_json(json_path), json_path, downsample)
    return SceneViews(views, "all", angle, str(obj_dir))


def read_manifest(root_dir, class_name: str) -> tuple[Path, dict]:
    root = Path(root_dir)
    for cand in (root / class_name / "manifest.json", root / "manifest.json"):
        if cand.exists():
            manifest = _read_json(cand)
            if manifest.get("class", class_name) == class_name:
                for key in ("train", "test"):
                    if not isinstance(manifest.get(key, []), list):
                        raise DatasetError(f"{cand}: field '{key}' must be a list of object ids")
                overlap = set(manifest.get("train", [])) & set(manifest.get("test", []))
                if overlap:
                    raise ValidationError(f"{cand}: objects in both train and test: {sorted(overlap)}")
                return cand.parent, manifest
    raise DatasetError(f"no manifest.json for class {class_name!r} under {root}")


def load_multi_object(root_dir, class_name: str, split: str = "train", downsample: int = 1,
                      views_per_object: int = VIEWS_PER_OBJECT) -> MultiObjectDataset:
    base, manifest = read_manifest(root_dir, class_name)
    ids = manifest.get(split)
    if ids is None:
        raise DatasetError(f"{base / 'manifest.json'}: missing field '{split}'")
    objects = []
    for oid in ids:
        scene = load_object(base / str(oid), downsample)
        if len(scene) != views_per_object:
            log.warning("skipping object %s: %d views, expected %d", oid, len(scene), views_per_object)
            continue
        objects.append((str(oid), scene))
    if not objects:
        raise ValidationError(f"class {class_name!r} split {split!r} has no usable objects")
    return MultiObjectDataset(class_name, split, objects)


# -- toy scenes -----------------------------------------------------------------
#
# Objects are unions of boxes and spheres with flat per-face colors and a fixed
# directional light, so appearance is view-independent and renders are exact.

_LIGHT = np.array([0.4, 0.3, 0.866])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_FACE_NORMALS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)


def _shade(base, normals):
    return base * (0.55 + 0.45 * np.clip(normals @ _LIGHT, 0.0, None))[..., None]


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple
    colors: tuple  # six RGB triples, order +x -x +y -y +z -z
    yaw: float = 0.0

    def intersect(self, o, d):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        lo = (o - np.asarray(self.center)) @ rot
        ld = d @ rot
        half = np.asarray(self.half)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            t1 = (-half - lo) * inv
            t2 = (half - lo) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        t_enter = np.nanmax(tmin, axis=1)
        t_exit = np.nanmin(tmax, axis=1)
        hit = (t_enter <= t_exit) & (t_enter > 0)
        axis = np.nanargmax(tmin, axis=1)
        sign = np.take_along_axis(ld, axis[:, None], 1)[:, 0] < 0
        face = axis * 2 + (~sign).astype(int)
        local_n = _FACE_NORMALS[face]
        normals = local_n @ rot.T
        base = np.asarray(self.colors, dtype=np.float64)[face]
        return np.where(hit, t_enter, np.inf), _shade(base, normals)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color: tuple

    def intersect(self, o, d):
        oc = o - np.asarray(self.center)
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - c
        t = -b - np.sqrt(np.maximum(disc, 0.0))
        hit = (disc >= 0) & (t > 0)
        pts = o + t[:, None] * d
        normals = (pts - np.asarray(self.center)) / self.radius
        base = np.broadcast_to(np.asarray(self.color, dtype=np.float64), normals.shape)
        return np.where(hit, t, np.inf), _shade(base, normals)


def render_toy(primitives, camera: Camera, supersample: int = 3) -> np.ndarray:
    """Exact RGBA render of a union of primitives (transparent background)."""
    from .geometry import pixel_rays

    s = supersample
    jj, ii = np.meshgrid(np.arange(camera.height * s), np.arange(camera.width * s), indexing="ij")
    o, d = pixel_rays(camera, (ii.ravel() + 0.5) / s, (jj.ravel() + 0.5) / s)
    best_t = np.full(len(o), np.inf)
    rgb = np.zeros((len(o), 3))
    for prim in primitives:
        t, col = prim.intersect(o, d)
        closer = t < best_t
        best_t[closer] = t[closer]
        rgb[closer] = col[closer]
    alpha = np.isfinite(best_t).astype(np.float64)
    rgba = np.concatenate([rgb * alpha[:, None], alpha[:, None]], axis=1)
    rgba = rgba.reshape(camera.height * s, camera.width * s, 4)
    rgba = downsample_box(rgba, s)
    # un-premultiply so that composite_alpha reproduces the box-filtered color
    a = rgba[..., 3:4]
    rgba[..., :3] = np.where(a > 0, rgba[..., :3] / np.maximum(a, 1e-12), 0.0)
    return np.clip(rgba, 0.0, 1.0)


def _random_color(rng):
    return tuple(float(c) for c in rng.uniform(0.15, 0.95, 3))


def _box(rng, center, half, yaw=0.0):
    return Box(tuple(center), tuple(half), tuple(_random_color(rng) for _ in range(6)), yaw)


def toy_object(kind: str, seed: int) -> list:
    """Primitives for one toy object of class ``kind``.

    Classes: ``lego`` (stacked blocks plus a ball, used as the desk-scale
    single scene), ``cubes``, ``spheres``, and the three multi-object classes
    ``cars``, ``chairs`` and ``planes``.
    """
    rng = np.random.default_rng(seed)
    if kind == "lego":
        return [
            _box(rng, (0.0, 0.0, -0.45), (0.9, 0.6, 0.25)),
            _box(rng, (-0.35, 0.0, 0.05), (0.4, 0.45, 0.25)),
            _box(rng, (0.45, 0.15, 0.0), (0.25, 0.3, 0.2), yaw=0.4),
            Sphere((0.35, -0.25, 0.45), 0.3, _random_color(rng)),
        ]
    if kind == "cubes":
        h = rng.uniform(0.45, 0.8)
        return [_box(rng, (0.0, 0.0, 0.0), (h, h, h), yaw=rng.uniform(0, np.pi / 2))]
    if kind == "spheres":
        return [Sphere((0.0, 0.0, 0.0), float(rng.uniform(0.5, 0.9)), _random_color(rng))]
    if kind == "cars":
        length, width = rng.uniform(0.8, 1.0), rng.uniform(0.35, 0.5)
        body = _box(rng, (0.0, 0.0, -0.15), (length, width, rng.uniform(0.18, 0.28)))
        cabin = _box(rng, (rng.uniform(-0.3, 0.1), 0.0, 0.22), (rng.uniform(0.3, 0.45), width * 0.9, 0.17))
        return [body, cabin]
    if kind == "chairs":
        w = rng.uniform(0.45, 0.6)
        seat = _box(rng, (0.0, 0.0, -0.1), (w, w, 0.08))
        back = _box(rng, (-w + 0.07, 0.0, 0.4), (0.07, w, rng.uniform(0.35, 0.5)))
        legs = [_box(rng, (sx * (w - 0.06), sy * (w - 0.06), -0.5), (0.06, 0.06, 0.32))
                for sx in (-1, 1) for sy in (-1, 1)]
        return [seat, back] + legs
    if kind == "planes":
        span = rng.uniform(0.8, 1.0)
        fuselage = _box(rng, (0.0, 0.0, 0.0), (rng.uniform(0.8, 1.0), 0.14, 0.14))
        wing = _box(rng, (rng.uniform(-0.1, 0.15), 0.0, 0.0), (0.22, span, 0.04))
        tail = _box(rng, (-0.75, 0.0, 0.2), (0.12, 0.06, 0.2))
        return [fuselage, wing, tail]
    raise ValidationError(f"unknown toy object kind {kind!r}")


def random_poses(n: int, rng, radius: float = 4.0, min_elev_deg: float = 5.0, max_elev_deg: float = 70.0):
    """``n`` look-at poses on the upper hemisphere, uniform in azimuth and area."""
    poses = []
    lo, hi = np.sin(np.deg2rad(min_elev_deg)), np.sin(np.deg2rad(max_elev_deg))
    for _ in range(n):
        az = rng.uniform(0.0, 2.0 * np.pi)
        z = rng.uniform(lo, hi)
        r = np.sqrt(1.0 - z * z)
        poses.append(look_at(radius * np.array([r * np.cos(az), r * np.sin(az), z])))
    return poses


def _write_frames(root: Path, subdir: str, primitives, poses, resolution: int, angle: float, prefix: str):
    focal = focal_from_angle(resolution, angle)
    frames = []
    for i, pose in enumerate(poses):
        cam = Camera(resolution, resolution, focal, pose)
        rel = f"{prefix}r_{i}"
        save_image(root / subdir / f"r_{i}.png", render_toy(primitives, cam))
        frames.append({"file_path": rel, "transform_matrix": pose.tolist()})
    return frames


def write_toy_scene(root_dir, kind: str = "lego", seed: int = 0, resolution: int = 100,
                    counts: dict | None = None, angle: float = LEGO_CAMERA_ANGLE_X) -> Path:
    """Write a NeRF-synthetic style toy scene; returns its root directory."""
    root = Path(root_dir)
    counts = counts or {"train": 100, "val": 8, "test": 8}
    prims = toy_object(kind, seed)
    rng = np.random.default_rng(seed + 7919)
    for split, count in counts.items():
        poses = random_poses(count, rng)
        frames = _write_frames(root, split, prims, poses, resolution, angle, f"./{split}/")
        with open(root / f"transforms_{split}.json", "w") as fh:
            json.dump({"camera_angle_x": angle, "frames": frames}, fh, indent=1)
    return root


def write_toy_object(obj_dir, kind: str, seed: int, resolution: int = 100,
                     n_views: int = VIEWS_PER_OBJECT, angle: float = LEGO_CAMERA_ANGLE_X) -> Path:
    obj_dir = Path(obj_dir)
    prims = toy_object(kind, seed)
    poses = random_poses(n_views, np.random.default_rng(seed + 104729))
    frames = _write_frames(obj_dir, ".", prims, poses, resolution, angle, "./")
    with open(obj_dir / "transforms.json", "w") as fh:
        json.dump({"camera_angle_x": angle, "frames": frames}, fh, indent=1)
    return obj_dir


def write_toy_class(root_dir, class_name: str, n_train: int = 4, n_test: int = 2, seed: int = 0,
                    resolution: int = 100, n_views: int = VIEWS_PER_OBJECT, kind: str | None = None) -> Path:
    """Write a multi-object class directory with its manifest."""
    base = Path(root_dir) / class_name
    ids = [f"{class_name}_{i:03d}" for i in range(n_train + n_test)]
    for i, oid in enumerate(ids):
        write_toy_object(base / oid, kind or class_name, seed * 1000 + i, resolution, n_views)
    manifest = {"class": class_name, "train": ids[:n_train], "test": ids[n_train:]}
    with open(base / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return base
