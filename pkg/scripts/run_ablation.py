"""Schedule and overlap ablations over the synthetic suite, printed as tables.

Usage: python3 scripts/run_ablation.py [--seeds 0,1,2,3,4] [--jobs N]
"""

import argparse
import dataclasses
import os
import time

from isac.engine import RunConfig
from isac.evaluation import ablation_run, synthetic_suite


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--suite-seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    args = parser.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    base = RunConfig()
    configs = {"baseline": dataclasses.replace(base, eta=0.0)}
    configs.update({f"sched {s}": dataclasses.replace(base, schedule=s) for s in "ABCDE"})
    configs.update({f"E + {k}": dataclasses.replace(base, loss_kind=k) for k in ("MAE", "KL", "IoU")})
    suite = synthetic_suite(args.suite_seed)
    start = time.perf_counter()
    results = ablation_run(configs, suite, seeds, jobs=args.jobs)
    print(f"{'config':10s} {'multi-class':>12s} {'multi-inst':>11s} {'all':>7s} {'fail':>5s}")
    for r in results:
        print(f"{r.config_id:10s} {r.mean('multi-class'):12.1f} {r.mean('multi-instance'):11.1f} "
              f"{r.mean():7.1f} {r.failures:5d}")
    print(f"{len(configs) * len(suite.prompts) * len(seeds)} runs in {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
