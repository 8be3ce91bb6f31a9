"""Line-delimited run-record files.

A run file holds a header object, one object per turn, then one per atom.
Decisions and judge transcripts go into sidecar files next to it.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable

from .core import (
    KBProbeError,
    KnowledgeAtom,
    Origin,
    RunRecord,
    SaturationConfig,
    TurnRecord,
)
from .metrics import summary_dict


class CorruptRecordError(KBProbeError):
    pass


def _dumps(obj: dict[str, Any]) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def run_path(out_dir: Path, run_id: str) -> Path:
    return Path(out_dir) / f"run_{run_id}.jsonl"


def decisions_path(out_dir: Path, run_id: str) -> Path:
    return Path(out_dir) / f"decisions_{run_id}.jsonl"


def transcripts_path(out_dir: Path, run_id: str) -> Path:
    return Path(out_dir) / f"transcripts_{run_id}.jsonl"


def header_dict(run: RunRecord, include_wall_clock: bool = False) -> dict[str, Any]:
    header = {
        "record": "run",
        "run_id": run.run_id,
        "policy_id": run.policy_id,
        "policy_params": run.policy_params,
        "model_id": run.model_id,
        "topic_id": run.topic_id,
        "saturation_config": asdict(run.saturation_config),
        "status": run.status,
        "total_cost_tokens": run.total_cost_tokens,
        "settings": run.settings,
        "summary": summary_dict(run),
    }
    # wall time varies between identical runs, so it is opt-in
    if include_wall_clock and run.wall_clock is not None:
        header["wall_clock"] = run.wall_clock
    return header


def turn_dict(turn: TurnRecord) -> dict[str, Any]:
    return {"record": "turn", **asdict(turn)}


def atom_dict(atom: KnowledgeAtom) -> dict[str, Any]:
    return {
        "record": "atom",
        "atom_id": atom.atom_id,
        "text": atom.text,
        "source_model_id": atom.source_model_id,
        "topic_id": atom.topic_id,
        "origin": atom.origin.to_dict(),
        "category": atom.category,
        "status": atom.status,
        "merged_into": atom.merged_into,
    }


def dump_lines(run: RunRecord, include_wall_clock: bool = False) -> list[str]:
    lines = [_dumps(header_dict(run, include_wall_clock))]
    lines += [_dumps(turn_dict(t)) for t in run.turn_records]
    lines += [_dumps(atom_dict(a)) for a in run.atoms]
    return lines


def _write_jsonl(path: Path, rows: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(row + "\n")


def write_run(run: RunRecord, out_dir: Path, include_wall_clock: bool = False) -> Path:
    """Write the run file plus decision and transcript sidecars; return the run path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = run_path(out_dir, run.run_id)
    _write_jsonl(path, dump_lines(run, include_wall_clock))
    _write_jsonl(decisions_path(out_dir, run.run_id), (_dumps(d) for d in run.decisions))
    _write_jsonl(transcripts_path(out_dir, run.run_id), (_dumps(t) for t in run.transcripts))
    return path


def _read_jsonl(path: Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorruptRecordError(f"{path}:{lineno}: {exc}") from exc
    return rows


def read_header(path: Path) -> dict[str, Any]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise CorruptRecordError(f"{path}: unreadable header") from exc
    if header.get("record") != "run":
        raise CorruptRecordError(f"{path}: first line is not a run header")
    return header


def read_run(path: Path) -> RunRecord:
    path = Path(path)
    rows = _read_jsonl(path)
    if not rows or rows[0].get("record") != "run":
        raise CorruptRecordError(f"{path}: missing run header")
    h = rows[0]
    try:
        turns = [
            TurnRecord(**{k: v for k, v in r.items() if k != "record"})
            for r in rows[1:]
            if r["record"] == "turn"
        ]
        atoms = [
            KnowledgeAtom(
                atom_id=r["atom_id"],
                text=r["text"],
                source_model_id=r["source_model_id"],
                topic_id=r["topic_id"],
                origin=Origin.from_dict(r["origin"]),
                category=r["category"],
                status=r["status"],
                merged_into=r["merged_into"],
            )
            for r in rows[1:]
            if r["record"] == "atom"
        ]
        run = RunRecord(
            run_id=h["run_id"],
            policy_id=h["policy_id"],
            policy_params=h["policy_params"],
            model_id=h["model_id"],
            topic_id=h["topic_id"],
            saturation_config=SaturationConfig(**h["saturation_config"]),
            turn_records=turns,
            atoms=atoms,
            total_cost_tokens=list(h["total_cost_tokens"]),
            wall_clock=h.get("wall_clock"),
            status=h["status"],
            settings=h.get("settings", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptRecordError(f"{path}: {exc}") from exc
    run_id = run.run_id
    dpath = decisions_path(path.parent, run_id)
    if dpath.exists():
        run.decisions = _read_jsonl(dpath)
    tpath = transcripts_path(path.parent, run_id)
    if tpath.exists():
        run.transcripts = _read_jsonl(tpath)
    return run
