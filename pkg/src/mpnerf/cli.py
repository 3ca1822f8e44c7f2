"""Command-line entry point: ``mpnerf {train,render,interpolate,eval,ablate,make-toy}``.

Every option can also be given in a JSON config file (``--config``) using the
option name with dashes replaced by underscores.  Precedence is
flags > config file > built-in defaults.  Exit codes: 0 success, 1 usage,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    SceneViews, load_multi_object, load_nerf_synthetic, load_object, save_image,
    write_toy_class, write_toy_scene,
)
from .decoder import load_checkpoint, save_checkpoint
from .errors import DatasetError, NumericError, ValidationError
from .evaluation import (
    ablate_references, cross_class_matrix, empty_field_psnr, eval_objects, eval_scene, fmt,
    write_matrix_csv, write_rows_csv,
)
from .geometry import Camera, orbit_poses
from .multiplane import ReferenceSet, mix_references
from .renderer import render_image
from .trainer import TrainConfig, fit_scene, reference_set, split_indices, train_multi_object

log = logging.getLogger("mpnerf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MIX_FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8)


class UsageFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- option tables ------------------------------------------------------------------
# (flag, type, default, help).  None defaults mean "no default"; dataset paths
# never get one.

TRAIN_OPTS = [
    ("iters", int, 20000, "training iterations"),
    ("seed", int, 0, "single source of randomness"),
    ("n_refs", int, 12, "reference images per object"),
    ("mode", str, None, "standard | generalization (default: generalization for --multi)"),
    ("kind", str, "multiplane", "multiplane | nerf (vanilla baseline)"),
    ("batch_rays", int, 1024, "rays per step"),
    ("samples", int, 64, "samples per ray"),
    ("lr", float, 5e-4, "initial learning rate"),
    ("lr_final", float, 5e-5, "learning rate reached at the last step"),
    ("hidden", str, "256,256,256,256,256,256,256,256", "trunk widths, comma separated"),
    ("color_hidden", int, 128, "width of the color branch"),
    ("uv_freqs", int, 0, "frequencies for encoding projected coordinates (0 = raw)"),
    ("sigma_noise", float, 0.0, "std of density pre-activation noise"),
    ("split", str, "azimuth_stratified", "first_n | azimuth_stratified"),
    ("near", float, 2.0, "ray start"),
    ("far", float, 6.0, "ray end"),
    ("background", str, "white", "white | black"),
    ("last_delta", str, "bin", "bin | inf"),
    ("downsample", int, 1, "box-filter factor applied to every loaded image"),
    ("shard_rays", int, 256, "rays per gradient shard"),
    ("objects_per_batch", int, 4, "objects drawn per step in multi-object training"),
    ("dtype", str, "float32", "float32 | float64"),
    ("checkpoint_every", int, 0, "write checkpoints/step_N.bin every N steps (0 = off)"),
    ("threads", int, None, "worker threads (default: MPNERF_THREADS or all cores)"),
]


def _add_opts(p, opts):
    for name, typ, _default, helptext in opts:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=helptext)


def _resolve(args, opts, extra_defaults=None) -> dict:
    """flags > config file > defaults."""
    cfg = {name: default for name, _t, default, _h in opts}
    cfg.update(extra_defaults or {})
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageFailure(f"cannot read config file {args.config}: {exc}") from None
        file_cfg = file_cfg.get("options", file_cfg)
        known = {name for name, *_ in opts} | set(extra_defaults or {})
        unknown = set(file_cfg) - known
        if unknown:
            raise UsageFailure(f"unknown keys in config file: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _background(name) -> tuple:
    if isinstance(name, (list, tuple)):
        return tuple(float(c) for c in name)
    try:
        return {"white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0)}[name]
    except KeyError:
        raise UsageFailure(f"unknown background {name!r}") from None


def train_config_from(opts: dict, multi: bool = False) -> TrainConfig:
    mode = opts.get("mode") or ("generalization" if multi else "standard")
    try:
        hidden = tuple(int(h) for h in str(opts["hidden"]).split(",") if h.strip())
    except ValueError:
        raise UsageFailure(f"bad --hidden value {opts['hidden']!r}") from None
    try:
        return TrainConfig(
            learning_rate=opts["lr"], lr_final=opts["lr_final"], batch_rays=opts["batch_rays"],
            iterations=opts["iters"], samples_per_ray=opts["samples"],
            sigma_noise_std=opts["sigma_noise"], seed=opts["seed"], mode=mode, n_refs=opts["n_refs"],
            split_strategy=opts["split"], hidden=hidden, color_hidden=opts["color_hidden"],
            uv_freqs=opts["uv_freqs"], kind=opts["kind"], near=opts["near"], far=opts["far"],
            background=_background(opts["background"]), last_delta=opts["last_delta"],
            dtype=opts["dtype"], shard_rays=opts["shard_rays"],
            objects_per_batch=opts["objects_per_batch"], threads=opts["threads"],
        )
    except ValidationError as exc:
        raise UsageFailure(str(exc)) from None
    except ValueError as exc:
        raise UsageFailure(str(exc)) from None


def _config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    d["background"] = list(cfg.background)
    return d


def _config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})


def hash_inputs(paths) -> str:
    """Content hash over every file below the given paths (sorted by path)."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        if not root.exists():
            raise DatasetError(f"input path {root} does not exist")
        files = sorted(p for p in root.rglob("*") if p.is_file()) if root.is_dir() else [root]
        for f in files:
            h.update(str(f.relative_to(root) if root.is_dir() else f.name).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(value, flag):
    if not value:
        raise UsageFailure(f"{flag} is required")
    return value


# -- references on disk ---------------------------------------------------------------

def save_references(out_dir, views: SceneViews, indices, camera_angle_x: float) -> None:
    """Store the representation as RGBA PNGs plus a transforms.json (exact 8-bit round trip)."""
    out = Path(out_dir)
    frames = []
    for k, idx in enumerate(indices):
        view = views.views[idx]
        save_image(out / f"ref_{k:03d}.png", view.rgba)
        frames.append({"file_path": f"./ref_{k:03d}", "transform_matrix": view.camera.pose.tolist()})
    _write_json(out / "transforms.json", {"camera_angle_x": camera_angle_x, "frames": frames})


def load_references(path, cfg: TrainConfig, downsample: int = 1) -> ReferenceSet:
    """A reference set from a directory holding ``transforms.json``.

    If it lists exactly ``n_refs`` frames they are used in order; otherwise the
    run's split strategy picks them (e.g. a held-out object directory).
    """
    views = load_object(path, downsample)
    if len(views) == cfg.n_refs:
        idx = list(range(cfg.n_refs))
    else:
        idx, _ = split_indices(views.cameras, cfg.n_refs, cfg.split_strategy)
    return reference_set(views, idx, cfg.background)


# -- commands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    opts = _resolve(args, TRAIN_OPTS, {"scene": None, "multi": None, "class_name": None, "out": None})
    multi = bool(opts["multi"])
    if not multi:
        _require(opts["scene"], "--scene (or --multi with --class)")
    else:
        _require(opts["class_name"], "--class")
    out = Path(_require(opts["out"], "--out"))
    cfg = train_config_from(opts, multi)
    every = int(opts["checkpoint_every"] or 0)
    if every < 0:
        raise UsageFailure("--checkpoint-every must be >= 0")

    if multi:
        data = load_multi_object(opts["multi"], opts["class_name"], "train", opts["downsample"])
    else:
        views = load_nerf_synthetic(opts["scene"], "train", opts["downsample"])

    out.mkdir(parents=True, exist_ok=True)
    inputs = [opts["multi"]] if multi else [opts["scene"]]
    run_cfg = {
        "command": "train",
        "version": __version__,
        "options": {k: v for k, v in opts.items()},
        "train_config": _config_to_dict(cfg),
        "seed": cfg.seed,
        "input_hash": hash_inputs(inputs),
    }
    run_cfg["options"]["out"] = None
    _write_json(out / "config.json", run_cfg)

    def on_step(step, params, _state):
        if every and step % every == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            save_checkpoint(out / "checkpoints" / f"step_{step:07d}.bin", params, step)

    if multi:
        result = train_multi_object([v for _, v in data.objects], cfg, on_step)
    else:
        result = fit_scene(views, cfg, on_step)
        if cfg.kind == "multiplane":
            ref_idx, _ = split_indices(views.cameras, cfg.n_refs, cfg.split_strategy)
            save_references(out / "references", views, ref_idx, views.camera_angle_x)

    save_checkpoint(out / "checkpoint.bin", result.params, cfg.iterations)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in result.history:
            w.writerow([step, fmt(loss), fmt(lr)])
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "wall_clock_s"])
        for step, secs in result.timings:
            w.writerow([step, f"{secs:.3f}"])
    print(f"final loss {fmt(result.history[-1][1])}; wrote {out}")
    return EXIT_OK


def _load_run(run_dir):
    run = Path(_require(run_dir, "--run"))
    try:
        meta = json.loads((run / "config.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{run}: missing config.json") from None
    cfg = _config_from_dict(meta["train_config"])
    return run, meta, cfg


def _checkpoint(run: Path, cfg: TrainConfig, path=None):
    params, _step, _extra = load_checkpoint(path or run / "checkpoint.bin", expect=cfg.architecture())
    return params


def _render_cameras(args, refs: ReferenceSet | None, width: int, height: int, focal: float):
    if args.poses:
        views = json.loads(Path(args.poses).read_text())
        poses = [np.asarray(f["transform_matrix"], dtype=np.float64) for f in views["frames"]]
    else:
        poses = orbit_poses(args.orbit, args.radius, args.elevation)
    return [Camera(width, height, focal, p) for p in poses]


def cmd_render(args, sweep: bool = False) -> int:
    run, _meta, cfg = _load_run(args.run)
    if args.threads is not None:
        cfg = _config_from_dict({**_config_to_dict(cfg), "threads": args.threads})
    params = _checkpoint(run, cfg, args.checkpoint)
    refs = None
    if cfg.kind == "multiplane":
        ref_dir = args.refs or (run / "references")
        refs = load_references(ref_dir, cfg)
    width = args.width or (refs.images[0].camera.width if refs else 100)
    height = args.height or (refs.images[0].camera.height if refs else 100)
    focal = args.focal or (refs.focal * width / refs.images[0].camera.width if refs else width * 1.3889)
    cams = _render_cameras(args, refs, width, height, focal)
    out = Path(_require(args.out, "--out"))
    rcfg = cfg.render_config()

    if sweep or args.mix is not None:
        if refs is None:
            raise UsageFailure("mixing needs a multiplane run")
        other = load_references(_require(args.mix_refs, "--mix-refs"), cfg)
        n = refs.n
        ks = [int(round(f * n)) for f in MIX_FRACTIONS] if sweep else [args.mix]
        for k in ks:
            mixed = mix_references(refs, other, k)
            for i, cam in enumerate(cams):
                save_image(out / f"mix_k{k:03d}" / f"pose_{i:03d}.png",
                           render_image(params, mixed, cam, rcfg, seed=cfg.seed))
        print(f"wrote {len(ks) * len(cams)} images to {out}")
        return EXIT_OK

    for i, cam in enumerate(cams):
        save_image(out / f"pose_{i:03d}.png", render_image(params, refs, cam, rcfg, seed=cfg.seed))
    print(f"wrote {len(cams)} images to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(_require(args.out, "--out"))
    if args.matrix:
        classes = [c for c in _require(args.classes, "--classes").split(",") if c]
        runs = dict(item.split("=", 1) for item in _require(args.runs, "--runs").split(","))
        trained, tests, cfg = {}, {}, None
        for cls in classes:
            if cls not in runs:
                raise UsageFailure(f"--runs has no entry for class {cls!r}")
            run, _meta, cfg_c = _load_run(runs[cls])
            trained[cls] = _checkpoint(run, cfg_c)
            cfg = cfg or cfg_c
        for cls in classes:
            data = load_multi_object(_require(args.multi, "--multi"), cls, "test", args.downsample)
            tests[cls] = data.objects
        matrix = cross_class_matrix(trained, tests, cfg, args.max_views)
        write_matrix_csv(out / "cross_class.csv", matrix)
        print(f"wrote {out / 'cross_class.csv'}")
        return EXIT_OK

    run, meta, cfg = _load_run(args.run)
    params = _checkpoint(run, cfg)
    if args.multi:
        cls = args.class_name or meta["options"].get("class_name")
        data = load_multi_object(args.multi, _require(cls, "--class"), args.split or "test", args.downsample)
        report = eval_objects(params, data.objects, cfg, f"{cls}:{data.split}", args.max_views)
        report.write_csv(out / "metrics.csv")
        print(f"mean PSNR {fmt(report.mean_psnr)} dB over {len(report.psnr)} objects")
        return EXIT_OK

    scene = args.scene or meta["options"].get("scene")
    views = load_nerf_synthetic(_require(scene, "--scene"), args.split or "test", args.downsample)
    if args.max_views:
        views = views.subset(range(min(args.max_views, len(views))))
    refs = load_references(run / "references", cfg) if cfg.kind == "multiplane" else None
    scene_id = args.scene_id or Path(scene).name
    report = eval_scene(params, refs, views, cfg.render_config(), seed=cfg.seed, scene_id=scene_id,
                        threads=args.threads, save_dir=(out / "renders") if args.save_renders else None)
    report.write_csv(out / "metrics.csv")
    _write_json(out / "report.json", {
        "scene_id": report.scene_id,
        "mean_psnr": fmt(report.mean_psnr),
        "mean_ssim": fmt(report.mean_ssim),
        "empty_field_psnr": fmt(empty_field_psnr(views, cfg.background)),
        "full_scale_reference": report.full_scale_reference,
    })
    print(f"mean PSNR {fmt(report.mean_psnr)} dB, mean SSIM {fmt(report.mean_ssim)}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    opts = _resolve(args, TRAIN_OPTS, {"scene": None, "out": None})
    scene = _require(opts["scene"], "--scene")
    out = Path(_require(opts["out"], "--out"))
    cfg = train_config_from(opts)
    try:
        counts = [int(c) for c in args.counts.split(",") if c]
        seeds = [int(s) for s in args.seeds.split(",") if s] if args.seeds else [cfg.seed]
        train = load_nerf_synthetic(scene, "train", opts["downsample"])
        test = load_nerf_synthetic(scene, "test", opts["downsample"])
        native = train.views[0].rgba.shape[1]
        resolutions = [int(r) for r in args.resolutions.split(",") if r] if args.resolutions else [native]
    except ValueError as exc:
        raise UsageFailure(str(exc)) from None
    rows = ablate_references(train, test, counts, resolutions, cfg, seeds, args.max_views)
    write_rows_csv(out / "ablation.csv", rows, ["n_refs", "resolution", "seed", "mean_psnr", "mean_ssim"])
    _write_json(out / "config.json", {"command": "ablate", "options": opts, "counts": counts,
                                      "resolutions": resolutions, "seeds": seeds,
                                      "input_hash": hash_inputs([scene])})
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    out = Path(_require(args.out, "--out"))
    if args.classes:
        for cls in args.classes.split(","):
            write_toy_class(out, cls, args.n_train, args.n_test, args.seed, args.resolution, args.views)
    else:
        write_toy_scene(out, args.kind, args.seed, args.resolution,
                        {"train": args.n_train_views, "val": 8, "test": args.n_test_views})
    print(f"wrote toy data to {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mpnerf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train on one scene or a multi-object class")
    t.add_argument("--config", help="JSON file with option values")
    t.add_argument("--scene", help="NeRF-synthetic scene directory")
    t.add_argument("--multi", help="multi-object dataset root")
    t.add_argument("--class", dest="class_name", help="object class inside --multi")
    t.add_argument("--out", help="run directory")
    _add_opts(t, TRAIN_OPTS)

    def render_opts(r):
        r.add_argument("--run", help="run directory written by train")
        r.add_argument("--checkpoint", help="checkpoint file (default: RUN/checkpoint.bin)")
        r.add_argument("--refs", help="reference directory (default: RUN/references)")
        r.add_argument("--mix-refs", help="second reference source for mixing")
        r.add_argument("--poses", help="transforms-style JSON with poses to render")
        r.add_argument("--orbit", type=int, default=4, help="number of orbit poses when --poses is absent")
        r.add_argument("--radius", type=float, default=4.0)
        r.add_argument("--elevation", type=float, default=30.0)
        r.add_argument("--width", type=int)
        r.add_argument("--height", type=int)
        r.add_argument("--focal", type=float)
        r.add_argument("--threads", type=int)
        r.add_argument("--out", help="output directory for PNGs")

    r = sub.add_parser("render", help="render novel views from a trained run")
    render_opts(r)
    r.add_argument("--mix", type=int, help="use the first K references of the run and the rest from --mix-refs")
    i = sub.add_parser("interpolate", help="render the representation-mixing sweep k = 0..80%% of n")
    render_opts(i)
    i.set_defaults(mix=None)

    e = sub.add_parser("eval", help="PSNR/SSIM reports")
    e.add_argument("--run")
    e.add_argument("--scene")
    e.add_argument("--scene-id")
    e.add_argument("--split")
    e.add_argument("--multi")
    e.add_argument("--class", dest="class_name")
    e.add_argument("--matrix", action="store_true", help="cross-class matrix over --classes")
    e.add_argument("--classes")
    e.add_argument("--runs", help="class=run_dir pairs, comma separated")
    e.add_argument("--max-views", type=int)
    e.add_argument("--downsample", type=int, default=1)
    e.add_argument("--save-renders", action="store_true")
    e.add_argument("--threads", type=int)
    e.add_argument("--out")

    a = sub.add_parser("ablate", help="PSNR versus reference count and training resolution")
    a.add_argument("--config")
    a.add_argument("--scene")
    a.add_argument("--out")
    a.add_argument("--counts", default="3,6,12")
    a.add_argument("--resolutions", help="training widths (default: native)")
    a.add_argument("--seeds")
    a.add_argument("--max-views", type=int)
    _add_opts(a, TRAIN_OPTS)

    m = sub.add_parser("make-toy", help="write the bundled synthetic toy data")
    m.add_argument("--out")
    m.add_argument("--kind", default="lego")
    m.add_argument("--classes", help="write multi-object classes instead of one scene")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--resolution", type=int, default=100)
    m.add_argument("--n-train", type=int, default=4, help="train objects per class")
    m.add_argument("--n-test", type=int, default=2, help="test objects per class")
    m.add_argument("--views", type=int, default=50, help="views per object")
    m.add_argument("--n-train-views", type=int, default=100)
    m.add_argument("--n-test-views", type=int, default=8)
    return p


COMMANDS = {
    "train": cmd_train,
    "render": cmd_render,
    "interpolate": lambda a: cmd_render(a, sweep=True),
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "make-toy": cmd_make_toy,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageFailure as exc:
        print(f"mpnerf {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ValidationError) as exc:
        print(f"mpnerf {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"mpnerf {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
