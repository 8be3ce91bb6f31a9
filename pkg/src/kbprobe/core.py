"""Domain types shared by every stage: atoms, turns, runs, saturation thresholds."""

from __future__ import annotations

import dataclasses
import hashlib
import re
from dataclasses import dataclass, field
from typing import Any, Literal, Optional, Sequence

import numpy as np

Status = Literal["raw", "unique", "valid", "rejected_duplicate", "rejected_audit"]
Category = Literal["factual", "conceptual", "procedural", "unclassified"]
StopReason = Literal[
    "low_growth", "low_efficiency", "low_novel", "max_turns", "none"
]

STATUSES: tuple[str, ...] = ("raw", "unique", "valid", "rejected_duplicate", "rejected_audit")
CATEGORIES: tuple[str, ...] = ("factual", "conceptual", "procedural", "unclassified")
# atoms that survived deduplication, whatever the audit said
NOVEL_STATUSES = frozenset({"unique", "valid", "rejected_audit"})

_LEGAL_EDGES = {
    ("raw", "unique"),
    ("raw", "rejected_duplicate"),
    ("unique", "valid"),
    ("unique", "rejected_audit"),
}

_BULLET_PREFIX = re.compile(r"^\s*(?:[-*•‣▪◦·]\s*)+")
_WS = re.compile(r"\s+")


class KBProbeError(Exception):
    """Base class for every error raised by this package."""


class EmptyTextError(KBProbeError, ValueError):
    pass


class IllegalTransitionError(KBProbeError, ValueError):
    def __init__(self, old: str, new: str):
        super().__init__(f"illegal status transition {old!r} -> {new!r}")
        self.old = old
        self.new = new


@dataclass(frozen=True)
class Origin:
    """Where an atom came from: policy, global turn, and sub-agent if any."""

    policy: str
    turn: int
    leaf: Optional[tuple[str, ...]] = None
    profile: Optional[int] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "policy": self.policy,
            "turn": self.turn,
            "leaf": list(self.leaf) if self.leaf is not None else None,
            "profile": self.profile,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Origin":
        leaf = d.get("leaf")
        return cls(
            policy=d["policy"],
            turn=int(d["turn"]),
            leaf=tuple(leaf) if leaf is not None else None,
            profile=d.get("profile"),
        )


@dataclass(frozen=True)
class KnowledgeAtom:
    atom_id: str
    text: str
    source_model_id: str
    topic_id: str
    origin: Origin
    category: Category = "unclassified"
    status: Status = "raw"
    embedding: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    merged_into: Optional[str] = None

    def __post_init__(self):
        if not self.text.strip():
            raise EmptyTextError("atom text is empty")
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if (self.merged_into is not None) != (self.status == "rejected_duplicate"):
            raise ValueError("merged_into must be set iff status is rejected_duplicate")
        if self.embedding is not None:
            norm = float(np.linalg.norm(self.embedding))
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"embedding norm {norm} is not 1")

    def with_embedding(self, vector: np.ndarray) -> "KnowledgeAtom":
        return dataclasses.replace(self, embedding=np.asarray(vector, dtype=np.float64))


def normalize_text(text: str) -> str:
    """Strip leading bullet markers and collapse internal whitespace."""
    text = _BULLET_PREFIX.sub("", text)
    return _WS.sub(" ", text).strip()


def make_atom_id(run_id: str, turn: int, ordinal: int) -> str:
    digest = hashlib.sha256(f"{run_id}|{turn}|{ordinal}".encode()).hexdigest()
    return f"a{digest[:15]}"


def mint_atom(
    text: str,
    origin: Origin,
    *,
    run_id: str,
    ordinal: int,
    model_id: str,
    topic_id: str,
) -> KnowledgeAtom:
    """Create a raw atom with a deterministic id.

    Raises EmptyTextError when nothing is left after normalization.
    """
    normalized = normalize_text(text)
    if not normalized:
        raise EmptyTextError(f"no text left after normalizing {text!r}")
    return KnowledgeAtom(
        atom_id=make_atom_id(run_id, origin.turn, ordinal),
        text=normalized,
        source_model_id=model_id,
        topic_id=topic_id,
        origin=origin,
    )


def transition(
    atom: KnowledgeAtom, new_status: Status, *, merged_into: Optional[str] = None
) -> KnowledgeAtom:
    if (atom.status, new_status) not in _LEGAL_EDGES:
        raise IllegalTransitionError(atom.status, new_status)
    if new_status == "rejected_duplicate" and merged_into is None:
        raise ValueError("rejected_duplicate requires merged_into")
    if new_status != "rejected_duplicate" and merged_into is not None:
        raise ValueError("merged_into only applies to rejected_duplicate")
    return dataclasses.replace(atom, status=new_status, merged_into=merged_into)


@dataclass(frozen=True)
class SaturationConfig:
    min_growth: float = 0.01
    min_efficiency: float = 0.10
    min_novel: int = 3
    max_turns: int = 15

    def __post_init__(self):
        if self.min_growth <= 0 or self.min_efficiency <= 0 or self.min_novel <= 0:
            raise ValueError("saturation thresholds must be strictly positive")
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")


@dataclass(frozen=True)
class TurnRecord:
    turn_index: int
    raw_count: int
    novel_count: int
    cumulative_unique: int
    growth_rate: Optional[float]
    efficiency: Optional[float]
    generation_tokens: int = 0
    embedding_tokens: int = 0
    stop_reason: Optional[StopReason] = None

    def __post_init__(self):
        if self.turn_index < 1:
            raise ValueError("turn_index starts at 1")
        if not 0 <= self.novel_count <= self.raw_count:
            raise ValueError("need 0 <= novel_count <= raw_count")


def growth_rate(novel: int, prior_unique: int) -> Optional[float]:
    # undefined against an empty prior set
    return novel / prior_unique if prior_unique > 0 else None


def efficiency(novel: int, raw: int) -> Optional[float]:
    return novel / raw if raw > 0 else None


def make_turn(
    turn_index: int,
    raw: int,
    novel: int,
    prior_unique: int,
    generation_tokens: int = 0,
    embedding_tokens: int = 0,
) -> TurnRecord:
    return TurnRecord(
        turn_index=turn_index,
        raw_count=raw,
        novel_count=novel,
        cumulative_unique=prior_unique + novel,
        growth_rate=growth_rate(novel, prior_unique),
        efficiency=efficiency(novel, raw),
        generation_tokens=generation_tokens,
        embedding_tokens=embedding_tokens,
    )


RunStatus = Literal["completed", "aborted", "incomplete_audit"]


def check_saturation(
    turn: TurnRecord, history: Sequence[TurnRecord], config: SaturationConfig
) -> StopReason:
    """First matching stop reason by priority, or "none"."""
    if turn.turn_index >= config.max_turns:
        return "max_turns"
    if turn.novel_count < config.min_novel:
        return "low_novel"
    if turn.efficiency is not None and turn.efficiency < config.min_efficiency:
        return "low_efficiency"
    if turn.turn_index > 1 and turn.growth_rate is not None and turn.growth_rate < config.min_growth:
        return "low_growth"
    return "none"


@dataclass
class RunRecord:
    run_id: str
    policy_id: str
    policy_params: dict[str, Any]
    model_id: str
    topic_id: str
    saturation_config: SaturationConfig
    turn_records: list[TurnRecord] = field(default_factory=list)
    atoms: list[KnowledgeAtom] = field(default_factory=list)
    total_cost_tokens: list[int] = field(default_factory=list)
    wall_clock: Optional[float] = None
    status: RunStatus = "completed"
    settings: dict[str, Any] = field(default_factory=dict)
    # sidecar data, written to their own files
    decisions: list[dict[str, Any]] = field(default_factory=list, repr=False)
    transcripts: list[dict[str, Any]] = field(default_factory=list, repr=False)

    @property
    def stop_reason(self) -> Optional[str]:
        return self.turn_records[-1].stop_reason if self.turn_records else None

    def count(self, *statuses: str) -> int:
        return sum(1 for a in self.atoms if a.status in statuses)

    @property
    def raw_total(self) -> int:
        return len(self.atoms)

    @property
    def unique_total(self) -> int:
        return self.count(*NOVEL_STATUSES)

    @property
    def valid_total(self) -> int:
        return self.count("valid")

    def valid_atoms(self) -> list[KnowledgeAtom]:
        return [a for a in self.atoms if a.status == "valid"]

    def check(self) -> None:
        """Raise AssertionError if the record breaks a bookkeeping invariant."""
        idx = [t.turn_index for t in self.turn_records]
        assert idx == list(range(1, len(idx) + 1)), f"turn indices not contiguous: {idx}"
        if self.status == "completed" and self.turn_records:
            assert self.turn_records[-1].stop_reason not in (None, "none")
        assert all(
            b >= a for a, b in zip(self.total_cost_tokens, self.total_cost_tokens[1:])
        ), "cost series decreases"
        assert len(self.total_cost_tokens) == len(self.turn_records)
        assert sum(t.raw_count for t in self.turn_records) == len(self.atoms)
        assert sum(t.novel_count for t in self.turn_records) == self.unique_total
        prev = 0
        for t in self.turn_records:
            assert t.cumulative_unique == prev + t.novel_count
            assert t.growth_rate == growth_rate(t.novel_count, prev)
            assert t.efficiency == efficiency(t.novel_count, t.raw_count)
            prev = t.cumulative_unique
