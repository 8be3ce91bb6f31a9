"""Three-model sim comparison: pipeline recall against fact-id ground truth.

Each model runs one pipeline on the same corpus.  The cross-model union is
built by the dedup pipeline; ground truth counts distinct corpus fact ids.
"""

import argparse
import sys

from kbprobe.config import config_from_dict
from kbprobe.metrics import recall
from kbprobe.policies import Explorer
from kbprobe.processor import KnowledgeProcessor, build_union
from kbprobe.sim_oracle import corpus_from_spec, fact_ids

MODELS = {
    "demo": {"noise_rate": 0.1},
    "sparse": {"coverage": 0.4},
    "mid": {"coverage": 0.7, "noise_rate": 0.05},
}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--pipeline", default="P4_Taxonomy_L3W3")
    p.add_argument("--topic", default="Deep Learning")
    args = p.parse_args(argv)

    cfg = config_from_dict({"experiment": {"seed": args.seed}, "sim": {"seed": args.seed, "models": MODELS}})
    corpus = corpus_from_spec(cfg.sim.corpus)
    ex = Explorer(cfg.build_gateway(), extra_settings=cfg.settings_dict())
    runs = [ex.run(cfg.policy(args.pipeline), args.topic, f"sim:{m}", m) for m in MODELS]
    union = build_union({r.model_id: r.valid_atoms() for r in runs}, KnowledgeProcessor(cfg.build_gateway()))
    truth = {r.model_id: fact_ids(r.valid_atoms(), corpus) for r in runs}
    everything = set().union(*truth.values())
    print(f"union: pipeline {len(union)}, ground truth {len(everything)} of {corpus.total_fact_count} facts")
    for r in runs:
        got = recall(r.model_id, union)
        want = len(truth[r.model_id]) / len(everything)
        print(f"{r.model_id:12s} valid {r.valid_total:4d}  recall {got:.4f}  oracle {want:.4f}  diff {got - want:+.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
