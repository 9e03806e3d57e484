"""Time the compiled kernels against the numpy fallback on representative inputs.

Run ``python benchmarks/bench_kernels.py``; prints one line per kernel with
the best-of-``--repeat`` wall time of each backend and the speed-up.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from affkp import kernels
from affkp.model import neighbours


def _inputs(rng):
    n_pix = 19200
    u = rng.uniform(-2, 162, 60000)
    v = rng.uniform(-2, 122, 60000)
    z = rng.uniform(0.3, 1.0, 60000)
    votes = np.concatenate([rng.normal(0, 0.01, (300, 3)), rng.normal(0.2, 0.01, (100, 3))])
    xyz = rng.normal(size=(2048, 3)) * 0.1
    nbr = neighbours(xyz, 16)
    rel = ((xyz[nbr] - xyz[:, None, :]) / 0.05).astype(np.float32)
    p = rng.normal(size=(2048, 64)).astype(np.float32)
    wp = rng.normal(size=(3, 64)).astype(np.float32)
    _, arg = kernels.neighbour_max(p, rel, wp, nbr)
    dz = rng.normal(size=(2048, 64)).astype(np.float32)
    return {
        "zbuffer": lambda m: m.zbuffer(u, v, z, 160, n_pix // 160),
        "mean_shift_seeds": lambda m: m.mean_shift_seeds(votes, votes[::4], 0.02, kernels.GAUSSIAN, 1e-5, 200),
        "neighbour_max": lambda m: m.neighbour_max(p, rel, wp, nbr),
        "neighbour_max_backward": lambda m: m.neighbour_max_backward(dz, arg, nbr, rel),
    }


def _best(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback is available")
    cases = _inputs(np.random.default_rng(0))
    print(f"{'kernel':<24}{'python [ms]':>14}{'compiled [ms]':>16}{'speed-up':>10}")
    for name, call in cases.items():
        t_py = _best(lambda: call(backends["python"]), args.repeat)
        if "compiled" in backends:
            t_c = _best(lambda: call(backends["compiled"]), args.repeat)
            print(f"{name:<24}{t_py * 1e3:>14.2f}{t_c * 1e3:>16.2f}{t_py / t_c:>9.1f}x")
        else:
            print(f"{name:<24}{t_py * 1e3:>14.2f}{'-':>16}{'-':>10}")


if __name__ == "__main__":
    main()
