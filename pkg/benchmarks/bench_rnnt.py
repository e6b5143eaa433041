"""Time the transducer forward-backward kernel on both backends.

    python benchmarks/bench_rnnt.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import time

import numpy as np

from tsotfnt import _kernels

SHAPES = [(16, 40, 10), (16, 120, 30), (32, 200, 60)]  # (B, T, U)


def make_inputs(B, T, U, K=33, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(B, T, U + 1, K))
    lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    return lp[..., 0].copy(), lp[..., 1].copy(), np.full(B, T), np.full(B, U)


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)

    backends = ["numpy"] + (["cython"] if _kernels.BACKEND == "cython" else [])
    if len(backends) == 1:
        print("compiled kernel not built; timing the numpy backend only")
    rows = []
    print(f"{'B':>4} {'T':>5} {'U':>4} " + " ".join(f"{b + ' ms':>11}" for b in backends) + "  speedup")
    for B, T, U in SHAPES:
        inputs = make_inputs(B, T, U)
        ref = _kernels.rnnt_forward_backward(*inputs, backend="numpy")
        row = {"B": B, "T": T, "U": U}
        for b in backends:
            out = _kernels.rnnt_forward_backward(*inputs, backend=b)
            assert np.allclose(out[0], ref[0], atol=1e-8), f"{b} disagrees with numpy"
            row[b] = best_time(lambda: _kernels.rnnt_forward_backward(*inputs, backend=b), args.repeat)
        speed = row["numpy"] / row["cython"] if "cython" in row else float("nan")
        row["speedup"] = speed
        rows.append(row)
        print(f"{B:>4} {T:>5} {U:>4} " + " ".join(f"{1e3 * row[b]:>11.2f}" for b in backends)
              + f"  {speed:7.1f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
