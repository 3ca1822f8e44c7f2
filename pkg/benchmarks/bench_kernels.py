"""Time the compiled and numpy kernel backends on the same inputs.

    python3 benchmarks/bench_kernels.py --points 65536 --refs 12 --repeat 5

Prints one line per (kernel, backend) with the best wall time and the
speedup of each backend over numpy.  Outputs of the two backends are also
compared so a fast but wrong build is caught here.
"""

import argparse
import timeit

import numpy as np

from mpnerf.geometry import invert_pose, look_at
from mpnerf.kernels import available_backends


def make_inputs(n_points, n_refs, res, n_samples, seed):
    rng = np.random.default_rng(seed)
    pts = np.ascontiguousarray(rng.uniform(-1.5, 1.5, (n_points, 3)))
    images = np.ascontiguousarray(rng.random((n_refs, res, res, 3)))
    eyes = rng.normal(size=(n_refs, 3))
    eyes *= 4.0 / np.linalg.norm(eyes, axis=1, keepdims=True)
    poses = [look_at(e, np.zeros(3)) for e in eyes]
    w2c = np.ascontiguousarray(np.stack([invert_pose(p) for p in poses]))
    rays = n_points // n_samples
    sigma = np.ascontiguousarray(rng.exponential(2.0, (rays, n_samples)))
    rgb = np.ascontiguousarray(rng.random((rays, n_samples, 3)))
    delta = np.full((rays, n_samples), 4.0 / n_samples)
    return dict(pts=pts, images=images, w2c=w2c, focal=1.2 * res, cam_pos=np.ascontiguousarray(eyes),
                sigma=sigma, rgb=rgb, delta=delta, bg=np.ones(3), grad=rng.normal(size=(rays, 3)))


def run_gather(mod, x):
    out = np.empty((len(x["pts"]), 5 * len(x["images"])))
    mod.gather_features(x["pts"], x["images"], x["w2c"], x["focal"], x["cam_pos"], False, out)
    return (out,)


def run_composite(mod, x):
    rays, n = x["sigma"].shape
    color, weights = np.empty((rays, 3)), np.empty((rays, n))
    mod.composite_forward(x["sigma"], x["rgb"], x["delta"], x["bg"], color, weights)
    d_sigma, d_rgb = np.empty((rays, n)), np.empty((rays, n, 3))
    mod.composite_backward(x["sigma"], x["rgb"], x["delta"], weights, x["bg"], x["grad"], d_sigma, d_rgb)
    return color, d_sigma, d_rgb


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=65536)
    ap.add_argument("--refs", type=int, default=12)
    ap.add_argument("--res", type=int, default=100)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    x = make_inputs(args.points, args.refs, args.res, args.samples, args.seed)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; timing numpy only")
    for name, fn in (("gather_features", run_gather), ("composite_fwd+bwd", run_composite)):
        results, times = {}, {}
        for label, mod in backends.items():
            results[label] = fn(mod, x)
            times[label] = min(timeit.repeat(lambda: fn(mod, x), number=1, repeat=args.repeat))
        err = 0.0
        if len(results) == 2:
            err = max(float(np.max(np.abs(p - q))) for p, q in zip(results["numpy"], results["cython"]))
        for label, t in times.items():
            print(f"{name:20s} {label:7s} {t * 1e3:9.2f} ms  x{times['numpy'] / t:5.2f}  max|diff| {err:.1e}")


if __name__ == "__main__":
    main()
