"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each case is timed with ``timeit`` (best of ``--repeat``) on both backends;
the last case runs a full particle simulation with the backend swapped in.
"""

import argparse
import json
import timeit

import numpy as np

from mvlab import kernels, presets
from mvlab.measures import EmpiricalMeasure
from mvlab.simulator import SimulationPlan, simulate_mckean_vlasov


def cases():
    rng = np.random.default_rng(0)
    pts2 = rng.normal(size=(200_000, 2))
    w2 = np.full(pts2.shape[0], 1 / pts2.shape[0])
    origin = np.floor(pts2.min(axis=0) / 0.05).astype(np.int64)
    shape = (np.floor(pts2.max(axis=0) / 0.05).astype(np.int64) - origin + 2).astype(np.int64)
    samples = rng.normal(size=(100_000, 1))
    ws = np.full(samples.shape[0], 1 / samples.shape[0])
    queries = np.linspace(-2, 2, 50)[:, None]
    return {
        "normals 1e6 x 1": lambda b: b.normals(1, 0, 0, 0, 1_000_000, 1),
        "uniforms 1e6 x 2": lambda b: b.uniforms(1, 1, 0, 0, 1_000_000, 2),
        "cic_deposit 2e5 pts 2-D": lambda b: b.cic_deposit(pts2, w2, 0.05, origin, shape),
        "kde_gauss 1e5 x 50": lambda b: b.kde_gauss(samples, ws, queries, 0.03),
    }


def simulate(backend):
    saved = kernels.backend
    kernels.backend = backend
    try:
        cs = presets.get("bump_drift_mu_dependent")
        simulate_mckean_vlasov(cs, EmpiricalMeasure.dirac([0.0]), SimulationPlan.uniform(100_000, 0, 0.5, 50, seed=1))
    finally:
        kernels.backend = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if not kernels.HAVE_COMPILED:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    backends = {"compiled": kernels.get_backend("compiled"), "python": kernels.get_backend("python")}
    table = {name: {} for name in cases()}
    table["simulate 1e5 particles x 50 steps"] = {}
    for label, b in backends.items():
        for name, fn in cases().items():
            table[name][label] = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat))
        table["simulate 1e5 particles x 50 steps"][label] = min(
            timeit.repeat(lambda: simulate(b), number=1, repeat=max(1, args.repeat // 2))
        )
    print(f"{'case':38s} {'compiled [s]':>12s} {'python [s]':>12s} {'speedup':>8s}")
    for name, row in table.items():
        print(f"{name:38s} {row['compiled']:12.4f} {row['python']:12.4f} {row['python'] / row['compiled']:8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(table, fh, indent=2)


if __name__ == "__main__":
    main()
