"""Compare the compiled and pure-Python tracing kernels.

    python3 benchmarks/bench_trace.py --gaussians 500 --rays 4000
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from surfeltrace import _backend
from surfeltrace.packing import as_rays
from surfeltrace.scene import Scene, logit
from surfeltrace.tracer import TraceOptions, Tracer


def make_scene(n: int, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Scene(
        mu=rng.uniform(-1, 1, (n, 3)), rot=q,
        scale_raw=np.log(rng.uniform(0.05, 0.25, (n, 2))),
        opacity_raw=logit(rng.uniform(0.1, 0.9, n)),
        sh=rng.normal(scale=0.3, size=(n, 9, 3)),
        albedo_raw=rng.normal(size=(n, 3)), roughness_raw=rng.normal(size=n),
    )


def make_rays(n: int, seed: int):
    rng = np.random.default_rng(seed + 1)
    o = rng.normal(size=(n, 3))
    o *= 3.0 / np.linalg.norm(o, axis=1, keepdims=True)
    d = rng.uniform(-0.8, 0.8, (n, 3)) - o
    return o, d / np.linalg.norm(d, axis=1, keepdims=True)


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench(backend: str, scene: Scene, rays, threads: int, repeat: int) -> dict:
    tracer = Tracer.from_scene(scene, materials=True,
                               options=TraceOptions(threads=threads, backend=backend))
    o, d, lo, hi = as_rays(*rays)
    out = tracer.forward_raw(o, d, lo, hi)
    grad = np.ones_like(out)
    fwd = best_of(lambda: tracer.forward_raw(o, d, lo, hi), repeat)
    bwd = best_of(lambda: tracer.backward_raw(o, d, lo, hi, grad), repeat)
    return {"forward": fwd, "backward": bwd, "out": out}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gaussians", type=int, default=500)
    ap.add_argument("--rays", type=int, default=4000)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    scene = make_scene(args.gaussians, args.seed)
    rays = make_rays(args.rays, args.seed)
    backends = ["python"]
    try:
        _backend.get("compiled")
        backends.insert(0, "compiled")
    except ImportError:
        print("compiled kernels unavailable; timing the Python fallback only")

    res = {b: bench(b, scene, rays, args.threads, args.repeat) for b in backends}
    print(f"{args.gaussians} gaussians, {args.rays} rays, {args.threads} thread(s)")
    print(f"{'backend':<10} {'forward s':>10} {'krays/s':>8} {'backward s':>11} {'krays/s':>8}")
    for b, r in res.items():
        print(f"{b:<10} {r['forward']:>10.4f} {args.rays / r['forward'] / 1e3:>8.1f} "
              f"{r['backward']:>11.4f} {args.rays / r['backward'] / 1e3:>8.1f}")
    if len(res) == 2:
        c, p = res["compiled"], res["python"]
        print(f"speedup: forward {p['forward'] / c['forward']:.1f}x, "
              f"backward {p['backward'] / c['backward']:.1f}x")
        print(f"max |compiled - python| = {np.abs(c['out'] - p['out']).max():.2e}")


if __name__ == "__main__":
    main()
