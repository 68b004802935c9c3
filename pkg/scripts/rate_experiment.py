"""Regret and uniform-gap decay rates on the standard scenarios.

    python scripts/rate_experiment.py boundary --reps 200
    python scripts/rate_experiment.py fast --reps 200
    python scripts/rate_experiment.py gap --reps 100

Prints one JSON table per run: mean per n, its stderr, and the log-log
slope with a jackknife stderr.
"""

from __future__ import annotations

import argparse
import sys
import time

from assure.jsonio import dumps
from assure.sim import ScenarioSpec, rate_experiment, uniform_gap_experiment

N_LIST = (250, 1000, 4000, 16000)

# all mu = h/sqrt(n) > K = 0: the best threshold is the permissive box edge,
# but the welfare gain per unit is of the same order as the estimation noise
BOUNDARY = ScenarioSpec(seed=2, generator={"kind": "two_point", "h": 1.0}, grid_size=201)

# mu = +-1 in equal proportions, sigma = 1, K = 0: interior optimum with a
# well-separated, strictly concave welfare peak
FAST = ScenarioSpec(seed=1, generator={"kind": "bimodal", "a": 1.0, "weight": 0.5, "exact": True}, grid_size=201)

# heterogeneous sigma and a continuous prior for the sup-gap experiment
GAP = ScenarioSpec(
    seed=5,
    generator={"kind": "gaussian_prior", "m": 0.0, "s": 1.0},
    sigma_source={"kind": "lognormal", "meanlog": 0.0, "sdlog": 0.5},
)

SCENARIOS = {"boundary": BOUNDARY, "fast": FAST, "gap": GAP}


def run(which: str, reps: int, n_list=N_LIST, threads=None, grid_points: int = 501):
    template = SCENARIOS[which]
    if which == "gap":
        return uniform_gap_experiment(template, n_list, reps, grid_points=grid_points, threads=threads)
    return rate_experiment(template, n_list, reps, "assure:threshold", "regret_paired", threads)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("which", choices=sorted(SCENARIOS))
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--n", default=",".join(map(str, N_LIST)), help="comma-separated sample sizes")
    p.add_argument("--threads", type=int)
    p.add_argument("--grid-points", type=int, default=501)
    args = p.parse_args(argv)
    n_list = [int(v) for v in args.n.split(",")]
    t0 = time.perf_counter()
    table = run(args.which, args.reps, n_list, args.threads, args.grid_points)
    out = {"scenario": args.which, "reps": args.reps, **table.to_dict(), "seconds": round(time.perf_counter() - t0, 1)}
    sys.stdout.write(dumps(out) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
