"""Yield, recall, accuracy, filtering rates and accuracy dynamics, plus CSV export."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .core import KBProbeError, KnowledgeAtom, RunRecord, check_saturation, make_turn


class TopicMismatchError(KBProbeError, ValueError):
    pass


class ModelNotInUnionError(KBProbeError, KeyError):
    pass


def _ratio(num: float, den: float) -> Optional[float]:
    return num / den if den else None


def accuracy_ratio(unique: int, valid: int) -> Optional[float]:
    """valid / unique; None when nothing is unique."""
    return _ratio(valid, unique)


def recall_ratio(covered: int, union_size: int) -> Optional[float]:
    return _ratio(covered, union_size)


def filtering_rates(raw: int, unique: int, valid: int) -> tuple[Optional[float], Optional[float]]:
    """(dedup rate raw->unique, audit rate unique->valid)."""
    if not raw >= unique >= valid >= 0:
        raise ValueError("need raw >= unique >= valid >= 0")
    return _ratio(raw - unique, raw), _ratio(unique - valid, unique)


def pct(x: Optional[float], digits: int = 1) -> str:
    return "n/a" if x is None else f"{100 * x:.{digits}f}%"


AUDITED = ("valid", "rejected_audit")
NOVEL_OUTCOMES = ("accepted_novel", "kept_after_judge")


def accuracy(source: Union[RunRecord, Iterable[KnowledgeAtom]]) -> Optional[float]:
    atoms = source.atoms if isinstance(source, RunRecord) else list(source)
    unique = sum(1 for a in atoms if a.status in AUDITED)
    valid = sum(1 for a in atoms if a.status == "valid")
    return accuracy_ratio(unique, valid)


def run_filtering_rates(run: RunRecord) -> tuple[Optional[float], Optional[float]]:
    return filtering_rates(run.raw_total, run.unique_total, run.valid_total)


def cumulative_counts(run: RunRecord) -> list[tuple[int, int]]:
    """(cumulative audited unique, cumulative valid) at the end of each turn."""
    T = len(run.turn_records)
    uniq = [0] * (T + 1)
    valid = [0] * (T + 1)
    for a in run.atoms:
        t = a.origin.turn
        if a.status in AUDITED:
            uniq[t] += 1
        if a.status == "valid":
            valid[t] += 1
    out, u, v = [], 0, 0
    for t in range(1, T + 1):
        u += uniq[t]
        v += valid[t]
        out.append((u, v))
    return out


@dataclass
class YieldCurve:
    run_id: str
    baseline_run_id: str
    baseline_size: int
    points: list[tuple[int, float]]  # (C_t, Y_t)
    valid_counts: list[int] = field(default_factory=list)

    @property
    def final_yield(self) -> float:
        return self.points[-1][1] if self.points else 0.0

    def value_at(self, budget: float) -> float:
        """Yield of the last turn whose cumulative cost fits in `budget`."""
        best = 0.0
        for c, y in self.points:
            if c <= budget:
                best = y
        return best


def yield_curve(run: RunRecord, baseline: RunRecord) -> YieldCurve:
    if run.topic_id != baseline.topic_id:
        raise TopicMismatchError(f"run topic {run.topic_id!r} != baseline topic {baseline.topic_id!r}")
    size = baseline.valid_total
    if size == 0:
        raise ValueError(f"baseline {baseline.run_id} has no valid atoms")
    valid = [v for _, v in cumulative_counts(run)]
    points = [(c, v / size) for c, v in zip(run.total_cost_tokens, valid)]
    return YieldCurve(run.run_id, baseline.run_id, size, points, valid)


def valid_at_budget(run: RunRecord, budget: float) -> int:
    """Cumulative valid count at the last turn boundary with C_t <= budget."""
    best = 0
    for c, (_, v) in zip(run.total_cost_tokens, cumulative_counts(run)):
        if c <= budget:
            best = v
    return best


def pareto_frontier(points: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """(cost, yield) points not dominated by a cheaper-or-equal, higher-or-equal point."""
    frontier, best = [], float("-inf")
    for c, y in sorted(points, key=lambda p: (p[0], -p[1])):
        if y > best:
            frontier.append((c, y))
            best = y
    return frontier


@dataclass
class AccuracyDynamics:
    series: list[Optional[float]]
    init_accuracy: Optional[float]
    decline_rate: Optional[float]


def decline_rate(series: Sequence[Optional[float]]) -> Optional[float]:
    """Endpoint drop per turn: (acc_1 - acc_T) / (T - 1)."""
    if len(series) < 2 or series[0] is None or series[-1] is None:
        return None
    return (series[0] - series[-1]) / (len(series) - 1)


def accuracy_dynamics(run: RunRecord) -> AccuracyDynamics:
    series = [accuracy_ratio(u, v) for u, v in cumulative_counts(run)]
    return AccuracyDynamics(series, series[0] if series else None, decline_rate(series))


def recall(model_id: str, union) -> float:
    """Share of union classes that contain a member from `model_id`."""
    if not any(model_id in m for m in union.membership.values()):
        raise ModelNotInUnionError(model_id)
    return union.covered_by(model_id) / len(union)


@dataclass
class ModelRow:
    model_id: str
    topic_id: str
    run_id: str
    raw: int
    unique: int
    valid: int
    accuracy: Optional[float]
    recall: float
    covered: int
    union_size: int
    exclusive: int
    init_accuracy: Optional[float]
    decline_rate: Optional[float]


@dataclass
class ComparisonReport:
    comparison_id: str
    topic_id: str
    union_size: int
    rows: list[ModelRow]
    accuracy_series: dict[str, list[Optional[float]]]

    def row(self, model_id: str) -> ModelRow:
        for r in self.rows:
            if r.model_id == model_id:
                return r
        raise ModelNotInUnionError(model_id)


def comparison_report(runs: Sequence[RunRecord], union, comparison_id: str) -> ComparisonReport:
    topics = {r.topic_id for r in runs}
    if len(topics) != 1:
        raise TopicMismatchError(f"runs span topics {sorted(topics)}")
    rows, series = [], {}
    for run in sorted(runs, key=lambda r: r.model_id):
        dyn = accuracy_dynamics(run)
        exclusive = sum(1 for m in union.membership.values() if m == frozenset({run.model_id}))
        rows.append(
            ModelRow(
                model_id=run.model_id,
                topic_id=run.topic_id,
                run_id=run.run_id,
                raw=run.raw_total,
                unique=run.unique_total,
                valid=run.valid_total,
                accuracy=accuracy_ratio(run.count(*AUDITED), run.valid_total),
                recall=recall(run.model_id, union) if run.valid_total else 0.0,
                covered=union.covered_by(run.model_id),
                union_size=len(union),
                exclusive=exclusive,
                init_accuracy=dyn.init_accuracy,
                decline_rate=dyn.decline_rate,
            )
        )
        series[run.model_id] = dyn.series
    return ComparisonReport(comparison_id, topics.pop(), len(union), rows, series)


# -- replay -----------------------------------------------------------------

def decision_log_series(run: RunRecord) -> list[Optional[float]]:
    """Cumulative accuracy per turn, from audit decisions alone."""
    T = len(run.turn_records)
    audited = [0] * (T + 1)
    valid = [0] * (T + 1)
    for d in run.decisions:
        if d.get("type") == "audit" and d.get("turn"):
            audited[d["turn"]] += 1
            valid[d["turn"]] += d["verdict"] == "valid"
    out, a, v = [], 0, 0
    for t in range(1, T + 1):
        a += audited[t]
        v += valid[t]
        out.append(accuracy_ratio(a, v))
    return out


def summary_dict(run: RunRecord) -> dict:
    return {
        "turns": len(run.turn_records),
        "raw": run.raw_total,
        "unique": run.unique_total,
        "valid": run.valid_total,
        "stop_reason": run.stop_reason,
        "accuracy_series": accuracy_dynamics(run).series,
    }


def replay_diffs(run: RunRecord, stored_summary: Optional[dict] = None) -> list[str]:
    """Recompute turn metrics from atoms and the decision log; list mismatches."""
    diffs: list[str] = []
    T = len(run.turn_records)
    raw = [0] * (T + 1)
    for a in run.atoms:
        if not 1 <= a.origin.turn <= T:
            diffs.append(f"atom {a.atom_id}: turn {a.origin.turn} outside 1..{T}")
            continue
        raw[a.origin.turn] += 1
    novel = [0] * (T + 1)
    for d in run.decisions:
        if d.get("type") == "dedup" and d.get("outcome") in NOVEL_OUTCOMES and d.get("turn"):
            novel[d["turn"]] += 1
    verdicts = {d["atom_id"]: d["verdict"] for d in run.decisions if d.get("type") == "audit"}
    for a in run.atoms:
        if a.status in AUDITED:
            want = "valid" if a.status == "valid" else "invalid"
            if verdicts.get(a.atom_id) != want:
                diffs.append(f"atom {a.atom_id}: status {a.status} but audit verdict {verdicts.get(a.atom_id)}")

    prior_unique, cost = 0, 0
    for i, stored in enumerate(run.turn_records):
        t = i + 1
        rec = make_turn(t, raw[t], novel[t], prior_unique, stored.generation_tokens, stored.embedding_tokens)
        reason = check_saturation(rec, (), run.saturation_config)
        for name in ("turn_index", "raw_count", "novel_count", "cumulative_unique", "growth_rate", "efficiency"):
            got, want = getattr(stored, name), getattr(rec, name)
            if got != want:
                diffs.append(f"turn {t} {name}: stored {got!r}, recomputed {want!r}")
        if stored.stop_reason != reason:
            diffs.append(f"turn {t} stop_reason: stored {stored.stop_reason!r}, recomputed {reason!r}")
        cost += stored.generation_tokens + stored.embedding_tokens
        if i < len(run.total_cost_tokens) and run.total_cost_tokens[i] != cost:
            diffs.append(f"turn {t} total_cost_tokens: stored {run.total_cost_tokens[i]}, recomputed {cost}")
        prior_unique = rec.cumulative_unique
    if len(run.total_cost_tokens) != T:
        diffs.append(f"total_cost_tokens has {len(run.total_cost_tokens)} entries for {T} turns")

    if stored_summary is not None:
        fresh = summary_dict(run)
        fresh["unique"] = sum(novel)
        fresh["valid"] = sum(1 for v in verdicts.values() if v == "valid")
        fresh["accuracy_series"] = decision_log_series(run)
        for key, want in fresh.items():
            if key in stored_summary and stored_summary[key] != want:
                diffs.append(f"summary {key}: stored {stored_summary[key]!r}, recomputed {want!r}")
    return diffs


# -- files ------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _parse_opt_float(s: str) -> Optional[float]:
    return None if s == "" else float(s)


def write_pareto_csv(curve: YieldCurve, out_dir: Path) -> Path:
    path = Path(out_dir) / f"pareto_{curve.run_id}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "baseline_run_id", "turn", "cost_tokens", "valid_cumulative", "yield"])
        for t, ((c, y), v) in enumerate(zip(curve.points, curve.valid_counts), 1):
            w.writerow([curve.run_id, curve.baseline_run_id, t, c, v, _fmt(y)])
    return path


def read_pareto_csv(path: Path) -> YieldCurve:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no rows")
    points = [(int(r["cost_tokens"]), float(r["yield"])) for r in rows]
    valid = [int(r["valid_cumulative"]) for r in rows]
    last = rows[-1]
    size = round(valid[-1] / points[-1][1]) if points[-1][1] else 0
    return YieldCurve(last["run_id"], last["baseline_run_id"], size, points, valid)


def write_yield_summary(
    finals: Mapping[tuple[str, str], float], out_dir: Path, name: str = "pareto_summary.csv"
) -> Path:
    """Final yield per (pipeline, topic); adds mean and std when >= 2 topics."""
    pipelines = sorted({p for p, _ in finals})
    topics = sorted({t for _, t in finals})
    path = Path(out_dir) / name
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["pipeline", *topics]
        if len(topics) >= 2:
            header += ["mean", "std"]
        w.writerow(header)
        for p in pipelines:
            vals = [finals.get((p, t)) for t in topics]
            row = [p, *map(_fmt, vals)]
            present = [v for v in vals if v is not None]
            if len(topics) >= 2 and len(present) >= 2:
                row += [_fmt(statistics.fmean(present)), _fmt(statistics.pstdev(present))]
            elif len(topics) >= 2:
                row += ["", ""]
            w.writerow(row)
    return path


_ROW_FIELDS = [
    "model_id", "topic_id", "run_id", "raw", "unique", "valid", "accuracy", "recall",
    "covered", "union_size", "exclusive", "init_accuracy", "decline_rate",
]
_INT_FIELDS = {"raw", "unique", "valid", "covered", "union_size", "exclusive"}
_OPT_FLOAT_FIELDS = {"accuracy", "init_accuracy", "decline_rate"}


def write_comparison_csv(report: ComparisonReport, out_dir: Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    main = out_dir / f"compare_{report.comparison_id}.csv"
    with open(main, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison_id", *_ROW_FIELDS])
        for r in report.rows:
            w.writerow([report.comparison_id, *(_fmt(getattr(r, f)) for f in _ROW_FIELDS)])
    series = out_dir / f"compare_{report.comparison_id}_accuracy.csv"
    with open(series, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison_id", "model_id", "turn", "accuracy"])
        for model, values in report.accuracy_series.items():
            for t, v in enumerate(values, 1):
                w.writerow([report.comparison_id, model, t, _fmt(v)])
    return main, series


def read_comparison_csv(path: Path) -> ComparisonReport:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        raw_rows = list(csv.DictReader(fh))
    if not raw_rows:
        raise ValueError(f"{path} has no rows")
    rows = []
    for r in raw_rows:
        kw = {}
        for f in _ROW_FIELDS:
            v = r[f]
            if f in _INT_FIELDS:
                kw[f] = int(v)
            elif f in _OPT_FLOAT_FIELDS:
                kw[f] = _parse_opt_float(v)
            elif f == "recall":
                kw[f] = float(v)
            else:
                kw[f] = v
        rows.append(ModelRow(**kw))
    cid = raw_rows[0]["comparison_id"]
    series: dict[str, list[Optional[float]]] = {r.model_id: [] for r in rows}
    spath = path.with_name(f"compare_{cid}_accuracy.csv")
    if spath.exists():
        with open(spath, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                series.setdefault(r["model_id"], []).append(_parse_opt_float(r["accuracy"]))
    return ComparisonReport(cid, rows[0].topic_id, rows[0].union_size, rows, series)
