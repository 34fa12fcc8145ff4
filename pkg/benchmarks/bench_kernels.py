"""Compare the numba kernels against the pure-numpy fallback.

Each backend runs in its own interpreter because ``XDEX_KERNELS`` is read at
import time. Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

BACKENDS = ("numba", "numpy")


def best_of(fn, repeat: int, number: int) -> float:
    fn()  # warm-up, includes JIT compilation on the numba path
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        for _ in range(number):
            fn()
        best = min(best, (time.perf_counter() - t) / number)
    return best


def measure(repeat: int) -> dict:
    import numpy as np

    from xdex import kernels
    from xdex.pose_model import default_skeleton, hand_keypoints
    from xdex.eigengrasp import synthetic_poses
    from xdex.retarget import RetargetConfig, map_targets, resolve_scale, solve
    from xdex.robot_hand import fixture_path, load_hand, points_and_jacobian

    rng = np.random.default_rng(0)
    model = load_hand(fixture_path("five_finger"))
    q = rng.uniform(model.lower, model.upper)
    config = RetargetConfig(smoothness_weight=0.0)
    skeleton = default_skeleton()
    scale = resolve_scale(model, config, skeleton)
    poses = synthetic_poses(64, seed=1)
    targets = [map_targets(hand_keypoints(skeleton, p), model, scale) for p in poses]
    q0 = model.mid_range()

    def solve_all():
        for tg in targets:
            solve(model, tg, q0, config)

    n_params = 45 * 512 + 512 * 512 * 2 + 512 * 10 + 3 * 512 + 10
    param = rng.normal(size=n_params).astype(np.float32)
    grad = rng.normal(size=n_params).astype(np.float32)
    m1 = np.zeros_like(param)
    m2 = np.zeros_like(param)

    return {
        "backend": kernels.BACKEND,
        "fk_jacobian_us": 1e6 * best_of(lambda: points_and_jacobian(model, q), repeat, 200),
        "solve_ms": 1e3 * best_of(solve_all, repeat, 1) / len(targets),
        "adam_ms": 1e3 * best_of(lambda: kernels.adam_update(param, grad, m1, m2, 1e-3, 0.9, 0.999, 1e-8, 10),
                                 repeat, 20),
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", default=None, help="also write results here")
    parser.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args(argv)
    if args.child:
        print(json.dumps(measure(args.repeat)))
        return 0

    results = {}
    for backend in BACKENDS:
        env = {**os.environ, "XDEX_KERNELS": backend}
        out = subprocess.run([sys.executable, __file__, "--child", "--repeat", str(args.repeat)],
                             env=env, check=True, capture_output=True, text=True).stdout
        results[backend] = json.loads(out.strip().splitlines()[-1])

    print(f"{'kernel':<16}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for key in ("fk_jacobian_us", "solve_ms", "adam_ms"):
        a, b = results["numba"][key], results["numpy"][key]
        print(f"{key:<16}{a:>12.3f}{b:>12.3f}{b / a:>9.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
