"""Time the compiled and pure-Python kernel backends on identical inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on a fixed random workload; outputs of the two backends are
checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from gazehoi import kernels


def workloads(rng):
    def boxes(n):
        xy = rng.uniform(0, 90, size=(n, 2))
        wh = rng.uniform(5, 30, size=(n, 2))
        return np.hstack([xy, xy + wh])

    cost = rng.uniform(0, 1, size=(40, 40))
    a, b = boxes(300), boxes(300)
    n_pred, n_gt = 2000, 400
    pred_h, pred_o = boxes(n_pred), boxes(n_pred)
    gt_h, gt_o = boxes(n_gt), boxes(n_gt)
    frame = rng.integers(0, 40, size=n_pred)
    lo = (frame * 10).astype(np.int64)
    hi = lo + 10
    tp = (rng.random(5000) < 0.3).astype(np.uint8)
    return {
        "lap_solve 40x40": lambda m: m.lap_solve(cost),
        "pairwise_iou 300x300": lambda m: m.pairwise_iou(a, b),
        "match_ranked 2000 preds": lambda m: m.match_ranked(pred_h, pred_o, lo, hi, gt_h, gt_o, 0.5),
        "all_point_ap 5000": lambda m: m.all_point_ap(tp, 2000),
    }


def same(x, y):
    """Exact for integer outputs; floating sums may differ in summation order."""
    if isinstance(x, tuple):
        return all(same(a, b) for a, b in zip(x, y))
    return np.allclose(np.asarray(x, dtype=float), np.asarray(y, dtype=float), rtol=1e-12, atol=0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    mods = kernels.backends()
    if "cython" not in mods:
        print("compiled kernels unavailable; timing the pure-Python backend only")
    jobs = workloads(np.random.default_rng(0))
    print(f"{'kernel':26s}" + "".join(f"{name:>14s}" for name in mods) + ("   speed-up" if len(mods) > 1 else ""))
    for label, fn in jobs.items():
        outs = {name: fn(m) for name, m in mods.items()}
        if len(outs) > 1 and not same(outs["python"], outs["cython"]):
            raise SystemExit(f"backends disagree on {label}")
        times = {name: min(timeit.repeat(lambda m=m: fn(m), number=1, repeat=args.repeat))
                 for name, m in mods.items()}
        row = f"{label:26s}" + "".join(f"{times[n] * 1e3:12.2f}ms" for n in mods)
        if len(mods) > 1:
            row += f"   {times['python'] / times['cython']:8.1f}x"
        print(row)


if __name__ == "__main__":
    main()
