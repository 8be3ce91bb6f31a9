"""Command line: kbprobe run | pareto | compare | replay.

Exit codes: 0 success, 1 usage or config error, 2 runtime or transport
failure, 3 replay mismatch.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, ExperimentConfig, SimSettings, load_config
from .core import KBProbeError, RunRecord
from .gateway import GatewayError
from .metrics import (
    TopicMismatchError,
    comparison_report,
    pct,
    replay_diffs,
    write_comparison_csv,
    write_pareto_csv,
    write_yield_summary,
    yield_curve,
)
from .policies import Explorer
from .processor import KnowledgeProcessor, build_union
from .prompts import TemplateRegistry
from .records import CorruptRecordError, read_header, read_run, write_run
from .sim_oracle import CorpusSpec, SimModel

log = logging.getLogger("kbprobe")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_MISMATCH = 0, 1, 2, 3


class UsageError(KBProbeError):
    pass


def slug(s: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", s.lower()).strip("-") or "x"


def make_run_id(pipeline: str, model: str, topic: str, seed: int) -> str:
    return f"{pipeline}__{slug(model)}__{slug(topic)}__s{seed}"


def _explorer(cfg: ExperimentConfig, trace: bool = False) -> Explorer:
    gateway = cfg.build_gateway(trace=trace)
    templates = TemplateRegistry(cfg.templates)
    processor = KnowledgeProcessor(gateway, cfg.dedup, templates)
    return Explorer(
        gateway,
        processor,
        templates,
        temperature=cfg.gateway.temperature,
        max_output_tokens=cfg.gateway.max_output_tokens,
        extra_settings=cfg.settings_dict(),
    )


def summary_line(run: RunRecord) -> str:
    cost = run.total_cost_tokens[-1] if run.total_cost_tokens else 0
    return (
        f"{run.run_id}: {run.status} turns={len(run.turn_records)} "
        f"raw/unique/valid={run.raw_total}/{run.unique_total}/{run.valid_total} "
        f"stop={run.stop_reason} tokens={cost}"
    )


def cmd_run(cfg: ExperimentConfig, args) -> int:
    topics = [args.topic] if args.topic else list(cfg.topics)
    models = [args.model] if args.model else list(cfg.models)
    pipelines = [args.pipeline] if args.pipeline else list(cfg.pipelines)
    out = Path(args.output or cfg.output)
    explorer = _explorer(cfg, trace=args.trace)
    failed = False
    # runs execute one after another so each gets a clean cost ledger
    for topic in topics:
        for model in models:
            for name in pipelines:
                run_id = make_run_id(name, model, topic, cfg.seed)
                explorer.extra_settings = {**cfg.settings_dict(), "pipeline": name}
                run = explorer.run(cfg.policy(name), topic, model, run_id)
                write_run(run, out, include_wall_clock=cfg.include_wall_clock)
                print(summary_line(run))
                failed |= run.status == "aborted"
    return EXIT_RUNTIME if failed else EXIT_OK


def _collect(paths: Sequence[str]) -> list[Path]:
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(p.glob("run_*.jsonl"))
        elif p.exists():
            files.append(p)
        else:
            raise UsageError(f"no such file or directory: {p}")
    return files


def _load_runs(paths: Sequence[str]) -> list[RunRecord]:
    files = _collect(paths)
    if not files:
        raise UsageError("no run files given")
    return [read_run(f) for f in files]


def cmd_pareto(cfg: ExperimentConfig, args) -> int:
    runs = _load_runs(args.runs)
    by_id = {r.run_id: r for r in runs}
    out = Path(args.output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.baseline:
        if args.baseline not in by_id:
            raise UsageError(f"baseline run {args.baseline!r} is not among the inputs")
        base = by_id[args.baseline]
        baselines = {(r.topic_id, r.model_id): base for r in runs}
    else:
        baselines = {
            (r.topic_id, r.model_id): r for r in runs if r.settings.get("pipeline") == cfg.baseline
        }
    many_models = len({r.model_id for r in runs}) > 1
    finals = {}
    for run in sorted(runs, key=lambda r: r.run_id):
        base = baselines.get((run.topic_id, run.model_id))
        if base is None:
            raise UsageError(f"no {cfg.baseline} baseline for topic {run.topic_id!r}, model {run.model_id!r}")
        curve = yield_curve(run, base)
        write_pareto_csv(curve, out)
        label = run.settings.get("pipeline", run.policy_id)
        if many_models:
            label = f"{label}@{run.model_id}"
        finals[(label, run.topic_id)] = curve.final_yield
        cost = curve.points[-1][0] if curve.points else 0
        print(f"{run.run_id}: final yield {curve.final_yield:.2f} at {cost} tokens")
    write_yield_summary(finals, out)
    return EXIT_OK


def _sim_settings(header_settings: dict, cfg: ExperimentConfig) -> ExperimentConfig:
    """Rebuild the backend a run was produced with, when its header records one."""
    sim = header_settings.get("sim")
    if not sim:
        return cfg
    models = {k: SimModel(**v) for k, v in sim.get("models", {}).items()}
    return replace(
        cfg,
        seed=header_settings.get("seed", cfg.seed),
        sim=SimSettings(CorpusSpec.from_dict(sim["corpus"]), models),
    )


def cmd_compare(cfg: ExperimentConfig, args) -> int:
    runs = _load_runs(args.runs)
    if len(runs) < 2:
        raise UsageError("compare needs run files for at least two models")
    topics = {r.topic_id for r in runs}
    if len(topics) > 1:
        raise UsageError(f"runs span several topics: {sorted(topics)}")
    models = [r.model_id for r in runs]
    if len(set(models)) != len(models):
        raise UsageError(f"more than one run per model: {sorted(models)}")
    cfg = _sim_settings(runs[0].settings, cfg)
    gateway = cfg.build_gateway(trace=args.trace)
    processor = KnowledgeProcessor(gateway, cfg.dedup, TemplateRegistry(cfg.templates))
    union = build_union({r.model_id: r.valid_atoms() for r in runs}, processor)
    cid = args.id or slug(next(iter(topics)))
    report = comparison_report(runs, union, cid)
    out = Path(args.output or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(report, out)
    print(f"union size {report.union_size}")
    for row in report.rows:
        print(f"{row.model_id}: recall {pct(row.recall)} accuracy {pct(row.accuracy)} valid {row.valid}")
    return EXIT_OK


def cmd_replay(cfg: ExperimentConfig, args) -> int:
    status = EXIT_OK
    for path in _collect(args.runs):
        run = read_run(path)
        diffs = replay_diffs(run, read_header(path).get("summary"))
        if diffs:
            status = EXIT_MISMATCH
            print(f"{run.run_id}: {len(diffs)} mismatches")
            for d in diffs:
                print(f"  {d}")
        else:
            print(f"{run.run_id}: replay clean")
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kbprobe", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="TOML experiment config")
    p.add_argument("--output", help="output directory (default from config)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--trace", action="store_true", help="log wire traffic")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run exploration pipelines")
    r.add_argument("--topic")
    r.add_argument("--model")
    r.add_argument("--pipeline")

    pa = sub.add_parser("pareto", help="yield curves normalised to a baseline run")
    pa.add_argument("runs", nargs="*", help="run files or directories")
    pa.add_argument("--baseline", help="run id of the baseline")

    c = sub.add_parser("compare", help="cross-model union recall and accuracy")
    c.add_argument("runs", nargs="*", help="run files or directories, one per model")
    c.add_argument("--id", help="comparison id used in file names")

    rp = sub.add_parser("replay", help="recompute metrics from a record and diff")
    rp.add_argument("runs", nargs="*", help="run files or directories")
    return p


COMMANDS = {"run": cmd_run, "pareto": cmd_pareto, "compare": cmd_compare, "replay": cmd_replay}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.trace else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if getattr(args, "pipeline", None):
            cfg.policy(args.pipeline)
        if args.command != "run" and not args.runs:
            raise UsageError(f"{args.command} needs at least one run file")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError, TopicMismatchError, KeyError) as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GatewayError, CorruptRecordError, KBProbeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
