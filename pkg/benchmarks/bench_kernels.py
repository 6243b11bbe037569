"""Compare the compiled and pure-numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeats 5]

Prints best-of-N wall times for farthest point sampling over many small
groups (the per-voxel preprocessing workload) and for ray casting a LiDAR
sweep against a cluttered scene.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from occloff import kernels
from occloff.config import RunConfig
from occloff.synthdata import build_scene, lidar_directions, _pack


def fps_workload(rng, n_groups=2000, size_range=(21, 80), keep=20):
    sizes = rng.integers(*size_range, size=n_groups)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    points = rng.normal(size=(int(offsets[-1]), 3))
    seeds = np.array([rng.integers(s) for s in sizes])
    return points, offsets, seeds, np.full(n_groups, keep)


def raycast_workload(n_rays=8192):
    spec = RunConfig().scene_spec(0)
    traj, surfaces = build_scene(spec, np.random.default_rng(0))
    kinds, params = _pack(surfaces)
    dirs = lidar_directions(n_rays, 16)
    origins = np.broadcast_to(traj.pose(0.0).transform[:3, 3], dirs.shape).copy()
    return origins, dirs, kinds, params, 60.0


def bench(fn, args, repeats):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeats))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    backends = {"python": kernels.python_backend}
    if kernels.compiled_backend is not None:
        backends["cython"] = kernels.compiled_backend
    else:
        print("compiled extension not built; timing the numpy backend only")
    work = {
        "fps_groups (2000 groups, keep 20)": ("fps_groups", fps_workload(np.random.default_rng(0))),
        "raycast (8192 rays)": ("raycast", raycast_workload()),
    }
    print(f"{'kernel':<36}" + "".join(f"{b:>12}" for b in backends) + "     speedup")
    for label, (name, wl) in work.items():
        times = {b: bench(getattr(mod, name), wl, args.repeats) for b, mod in backends.items()}
        row = f"{label:<36}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times.values())
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
