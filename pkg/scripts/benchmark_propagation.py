"""Time the compiled propagation kernel against the pure-Python one.

Both backends share the arithmetic recipe bitwise, so this is purely a
throughput comparison on synthetic unit-norm feature grids. Run after
an editable install:

    python scripts/benchmark_propagation.py
    python scripts/benchmark_propagation.py --grids 16,32 --repeats 5
"""

import argparse
import time

import numpy as np

from vidcorr.propagation import (
    FeatureMap,
    LabelMap,
    PropagationConfig,
    active_backend,
    propagate_frame,
)


def make_instance(seed, side, frames, d=64, classes=4):
    g = np.random.default_rng(seed)

    def unit_grid():
        z = g.normal(size=(side, side, d))
        return z / np.sqrt((z * z).sum(axis=-1, keepdims=True))

    target = FeatureMap(unit_grid())
    context = [(FeatureMap(unit_grid(), i),
                LabelMap(np.eye(classes)[g.integers(0, classes, size=(side, side))]))
               for i in range(frames)]
    return target, context


def time_backend(backend, target, context, config, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = propagate_frame(target, context, config, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--grids", default="16,28",
                        help="comma list of square grid sides (56 matches a "
                             "448-pixel frame at patch 8; budget a minute "
                             "per python-backend repeat there)")
    parser.add_argument("--frames", type=int, default=11,
                        help="context frames per instance")
    parser.add_argument("--radius", type=int, default=12)
    parser.add_argument("--top-k", type=int, default=5)
    parser.add_argument("--repeats", type=int, default=2,
                        help="timed runs per backend; best is reported")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    backends = ["python"]
    if active_backend() == "compiled":
        backends.append("compiled")
    else:
        print("compiled kernel unavailable; timing the python backend only")

    config = PropagationConfig(top_k=args.top_k, radius=args.radius)
    print(f"frames={args.frames} radius={args.radius} top_k={args.top_k} "
          f"repeats={args.repeats}")
    print(f"{'grid':>6} " + " ".join(f"{b:>12}" for b in backends)
          + ("     speedup  agreement" if len(backends) == 2 else ""))
    for side in (int(s) for s in args.grids.split(",")):
        target, context = make_instance(args.seed, side, args.frames)
        row = f"{side}x{side:<3}"
        times, outs = [], []
        for backend in backends:
            best, out = time_backend(backend, target, context, config,
                                     args.repeats)
            times.append(best)
            outs.append(out.grid)
            row += f" {best * 1e3:>10.1f}ms"
        if len(backends) == 2:
            same = "bitwise" if outs[0].tobytes() == outs[1].tobytes() else "DIFFER"
            row += f" {times[0] / times[1]:>10.1f}x  {same}"
        print(row)


if __name__ == "__main__":
    main()
