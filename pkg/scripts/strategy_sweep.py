"""Compare exploration strategies on seeded sim corpora at equal token budget.

For each seed, every pipeline runs once against the same corpus.  The budget
is the final cost of the reference pipeline, and each run is scored by its
valid-atom count at the last turn boundary within that budget.

    python scripts/strategy_sweep.py --seeds 10
    python scripts/strategy_sweep.py --seeds 10 --loose   # stopping rules off
"""

import argparse
import csv
import statistics
import sys
from dataclasses import replace

from kbprobe.config import ExperimentConfig, SimSettings
from kbprobe.core import SaturationConfig
from kbprobe.metrics import valid_at_budget
from kbprobe.policies import PRESETS, Explorer
from kbprobe.sim_oracle import CorpusSpec

LOOSE = SaturationConfig(min_growth=1e-9, min_efficiency=1e-9, min_novel=1, max_turns=40)


def run_seed(seed, pipelines, reference, args):
    spec = CorpusSpec(seed=seed, branching=args.branching, depth=args.depth,
                      facts_per_leaf=args.facts_per_leaf, zipf_s=args.zipf_s)
    cfg = ExperimentConfig(seed=seed, sim=SimSettings(spec))
    ex = Explorer(cfg.build_gateway(), extra_settings=cfg.settings_dict())
    runs = {}
    for name in pipelines:
        policy = cfg.policy(name)
        if args.loose and name != reference:
            policy = replace(policy, saturation=LOOSE)
        runs[name] = ex.run(policy, args.topic, "sim:demo", f"{name}-s{seed}")
    budget = runs[reference].total_cost_tokens[-1]
    rows = []
    for name, run in runs.items():
        rows.append({
            "seed": seed,
            "pipeline": name,
            "turns": len(run.turn_records),
            "final_cost": run.total_cost_tokens[-1],
            "final_valid": run.valid_total,
            "budget": budget,
            "valid_at_budget": valid_at_budget(run, budget),
        })
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--pipelines", nargs="+", default=["P4_Taxonomy_L3W3", "P2_Sequential", "P5_MultiProfile_N3"])
    p.add_argument("--reference", default="P4_Taxonomy_L3W3")
    p.add_argument("--topic", default="Deep Learning")
    p.add_argument("--branching", type=int, default=3)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--facts-per-leaf", type=int, default=20)
    p.add_argument("--zipf-s", type=float, default=1.1)
    p.add_argument("--loose", action="store_true", help="disable early stopping for non-reference pipelines")
    p.add_argument("--csv", help="write per-run rows here")
    args = p.parse_args(argv)
    for name in args.pipelines:
        if name not in PRESETS:
            p.error(f"unknown pipeline {name}")
    if args.reference not in args.pipelines:
        args.pipelines.insert(0, args.reference)

    rows = []
    for seed in range(args.seeds):
        rows += run_seed(seed, args.pipelines, args.reference, args)

    ratios = {n: [] for n in args.pipelines if n != args.reference}
    for seed in range(args.seeds):
        by = {r["pipeline"]: r for r in rows if r["seed"] == seed}
        ref = by[args.reference]["valid_at_budget"]
        cells = []
        for name in ratios:
            other = by[name]["valid_at_budget"]
            ratio = ref / other if other else float("inf")
            ratios[name].append(ratio)
            cells.append(f"{name}={other} ({ratio:.2f}x)")
        print(f"seed {seed}: {args.reference}={ref} at {by[args.reference]['budget']} tokens; " + ", ".join(cells))
    for name, rs in ratios.items():
        finite = [r for r in rs if r != float("inf")]
        print(f"{args.reference} / {name}: min {min(rs):.2f}x  median {statistics.median(finite):.2f}x")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
