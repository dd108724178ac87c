"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py --vertices 5000 --repeat 20
"""

import argparse
import time

import numpy as np

from facecode import kernels
from facecode.energy import EnergyWeights
from facecode.fitting import energy_gradient
from facecode.model import build_mesh, generate_synthetic_basis
from facecode.render import Camera
from facecode.synthetic import MotionConfig, generate_synthetic_video


def timeit(fn, repeat):
    fn()  # warm-up
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--vertices", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    basis = generate_synthetic_basis(args.seed, args.vertices)
    cam = Camera(224, 224)
    video = generate_synthetic_video(basis, cam, args.seed, 1, MotionConfig())
    frame, code = video.frames[0], video.codes[0]
    mesh = build_mesh(basis, code)
    rng = np.random.default_rng(args.seed)
    uv = rng.uniform(0, 224, (args.vertices, 2))
    depth = -rng.uniform(1, 2, args.vertices)
    mask = np.ones(args.vertices, dtype=bool)
    g = rng.normal(size=(args.vertices, 3))

    cases = {
        "accumulate_normals": lambda: kernels.accumulate_normals(mesh.positions, basis.triangles),
        "normals_backward": lambda: kernels.normals_backward(mesh.positions, basis.triangles, g),
        "bilinear_gather": lambda: kernels.bilinear_gather(frame.image, uv),
        "splat_zbuffer": lambda: kernels.splat_zbuffer(uv, depth, mesh.reflectance, mask, 224, 224),
        "energy_gradient": lambda: energy_gradient(code, basis, cam, frame, EnergyWeights()),
    }
    backends = kernels.available_backends()
    previous = kernels.active_backend()
    results = {}
    for name in backends:
        kernels.use_backend(name)
        results[name] = {k: timeit(f, args.repeat) for k, f in cases.items()}
    kernels.use_backend(previous)

    print(f"N = {args.vertices} vertices, best of {args.repeat} (milliseconds)")
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for k in cases:
        row = f"{k:<20}" + "".join(f"{1e3 * results[b][k]:12.3f}" for b in backends)
        if "cython" in results and "python" in results:
            row += f"{results['python'][k] / results['cython'][k]:11.1f}x"
        print(row)
    if len(backends) == 1:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
