"""Turning raw candidates into unique, valid atoms.

Three stages run per turn pool: exact-threshold vector merging, an LLM judge
for the ambiguity band, then a YES/NO domain audit of every surviving atom.
The same dedup pass builds the cross-model union.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, Optional, Sequence

import numpy as np

from .core import KBProbeError, KnowledgeAtom, transition
from .gateway import JUDGE_TEMPERATURE, ChatRequest, Gateway, GatewayError
from .prompts import TemplateRegistry

log = logging.getLogger(__name__)

Outcome = Literal["accepted_novel", "merged_strict", "merged_by_judge", "kept_after_judge"]


class FailedAdjudicationError(KBProbeError):
    pass


class AuditUnavailableError(KBProbeError):
    pass


class JudgeUnavailableError(KBProbeError):
    pass


@dataclass(frozen=True)
class DedupConfig:
    strict_threshold: float = 0.92
    fuzzy_low: float = 0.70
    judge_model_id: str = "sim:judge"
    audit_model_id: str = "sim:judge"
    embed_model_id: str = "sim:embed"

    def __post_init__(self):
        if not 0 < self.fuzzy_low < self.strict_threshold < 1:
            raise ValueError("need 0 < fuzzy_low < strict_threshold < 1")


@dataclass(frozen=True)
class DedupDecision:
    candidate_atom_id: str
    outcome: Outcome
    matched_atom_id: Optional[str] = None
    similarity: Optional[float] = None
    judge_verdict: Optional[str] = None
    transcript_id: Optional[str] = None

    def __post_init__(self):
        if (self.matched_atom_id is not None) != (self.outcome != "accepted_novel"):
            raise ValueError("matched_atom_id is set iff the outcome is not accepted_novel")
        if self.matched_atom_id is not None and self.similarity is None:
            raise ValueError("similarity required when a neighbour is named")

    @property
    def is_novel(self) -> bool:
        return self.outcome in ("accepted_novel", "kept_after_judge")


@dataclass(frozen=True)
class AuditDecision:
    atom_id: str
    verdict: Literal["valid", "invalid"]
    transcript_id: Optional[str] = None
    flagged: bool = False


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    for v in (a, b):
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-6:
            raise ValueError("cosine expects unit vectors")
    return float(np.dot(a, b))


def route(similarity: Optional[float], config: DedupConfig) -> Literal["strict", "judge", "novel"]:
    """Strict merge above the threshold; the band (fuzzy_low, strict] goes to the judge."""
    if similarity is None:
        return "novel"
    if similarity > config.strict_threshold:
        return "strict"
    if similarity > config.fuzzy_low:
        return "judge"
    return "novel"


class AcceptedSet:
    """Unique atoms of a run with their embeddings stacked for exhaustive search."""

    def __init__(self, dim: Optional[int] = None):
        self.atoms: list[KnowledgeAtom] = []
        self._matrix = np.zeros((0, dim or 0))
        self._n = 0
        self._pos: dict[str, int] = {}

    def __len__(self) -> int:
        return self._n

    def add(self, atom: KnowledgeAtom) -> None:
        vec = atom.embedding
        if vec is None:
            raise ValueError("accepted atoms must carry an embedding")
        if self._n == 0 and self._matrix.shape[1] != len(vec):
            self._matrix = np.zeros((64, len(vec)))
        if self._n == self._matrix.shape[0]:
            grown = np.zeros((max(64, 2 * self._n), self._matrix.shape[1]))
            grown[: self._n] = self._matrix[: self._n]
            self._matrix = grown
        self._matrix[self._n] = vec
        self._pos[atom.atom_id] = self._n
        self.atoms.append(atom)
        self._n += 1

    def replace(self, atom: KnowledgeAtom) -> None:
        """Swap in an updated copy of an atom (e.g. after its audit)."""
        self.atoms[self._pos[atom.atom_id]] = atom

    def nearest(self, vec: np.ndarray) -> tuple[Optional[KnowledgeAtom], Optional[float]]:
        if self._n == 0:
            return None, None
        sims = self._matrix[: self._n] @ vec
        i = int(np.argmax(sims))  # first maximum wins, i.e. the earliest atom
        return self.atoms[i], float(sims[i])


def parse_verdict(text: str) -> Optional[str]:
    word = text.strip().strip("'\"`*. \n").upper()
    if word.startswith("YES"):
        return "YES"
    if word.startswith("NO"):
        return "NO"
    return None


@dataclass
class JudgeCall:
    verdict: str  # YES or NO
    prompt: str
    response: str
    flagged: bool = False


class Judge:
    """Renders judge prompts and parses YES/NO replies, re-asking once on junk."""

    def __init__(self, gateway: Gateway, config: DedupConfig, templates: TemplateRegistry):
        self.gateway = gateway
        self.config = config
        self.templates = templates

    def _ask(self, model_id: str, prompt: str) -> JudgeCall:
        replies = []
        for attempt in range(2):
            req = ChatRequest.user(
                model_id, prompt, temperature=JUDGE_TEMPERATURE, max_output_tokens=8,
                seed=attempt or None,
            )
            text = self.gateway.chat(req).text
            replies.append(text)
            verdict = parse_verdict(text)
            if verdict is not None:
                return JudgeCall(verdict, prompt, text, flagged=attempt > 0)
        log.warning("judge gave no YES/NO twice; treating as NO")
        return JudgeCall("NO", prompt, "\n---\n".join(replies), flagged=True)

    def redundant(self, text1: str, text2: str) -> JudgeCall:
        prompt = self.templates.render("judge.dedup", text1=text1, text2=text2)
        return self._ask(self.config.judge_model_id, prompt)

    def audit(self, text: str, topic: str) -> JudgeCall:
        prompt = self.templates.render("judge.audit", query=topic, knowledge_point=text)
        return self._ask(self.config.audit_model_id, prompt)


JudgeFn = Callable[[KnowledgeAtom, KnowledgeAtom], JudgeCall]


def dedup_insert(
    candidate: KnowledgeAtom,
    accepted: AcceptedSet,
    config: DedupConfig,
    judge: JudgeFn,
) -> tuple[DedupDecision, KnowledgeAtom, Optional[JudgeCall]]:
    """Decide one candidate against its nearest accepted neighbour.

    Novel candidates (including ones the judge keeps) are added to `accepted`.
    Raises JudgeUnavailableError if the judge call fails in transport.
    """
    if candidate.status != "raw" or candidate.embedding is None:
        raise ValueError("candidate must be raw and embedded")
    neighbour, s = accepted.nearest(candidate.embedding)
    path = route(s, config)
    call = None
    if path == "strict":
        decision = DedupDecision(candidate.atom_id, "merged_strict", neighbour.atom_id, s)
    elif path == "judge":
        try:
            call = judge(candidate, neighbour)
        except GatewayError as exc:
            raise JudgeUnavailableError(str(exc)) from exc
        outcome = "merged_by_judge" if call.verdict == "YES" else "kept_after_judge"
        decision = DedupDecision(candidate.atom_id, outcome, neighbour.atom_id, s, call.verdict)
    else:
        decision = DedupDecision(candidate.atom_id, "accepted_novel", similarity=s)
    if decision.is_novel:
        updated = transition(candidate, "unique")
        accepted.add(updated)
    else:
        updated = transition(candidate, "rejected_duplicate", merged_into=decision.matched_atom_id)
    return decision, updated, call


@dataclass
class RunState:
    """Single-writer state of one run (or one union build)."""

    accepted: AcceptedSet = field(default_factory=AcceptedSet)
    decisions: list[dict] = field(default_factory=list)
    transcripts: list[dict] = field(default_factory=list)
    incomplete_audit: bool = False

    def log_transcript(self, call: JudgeCall) -> str:
        tid = f"t{len(self.transcripts) + 1:06d}"
        self.transcripts.append(
            {"transcript_id": tid, "prompt": call.prompt, "response": call.response, "flagged": call.flagged}
        )
        return tid

    def log_decision(self, kind: str, turn: Optional[int], payload: dict) -> None:
        did = f"d{len(self.decisions) + 1:06d}"
        self.decisions.append({"decision_id": did, "type": kind, "turn": turn, **payload})


@dataclass
class PoolResult:
    atoms: list[KnowledgeAtom]  # every pool atom, final status, pool order
    novel: list[KnowledgeAtom]  # n_t of them, post-audit status
    dedup_decisions: list[DedupDecision]
    audit_decisions: list[AuditDecision]

    @property
    def novel_count(self) -> int:
        return len(self.novel)


class KnowledgeProcessor:
    def __init__(
        self,
        gateway: Gateway,
        config: DedupConfig = DedupConfig(),
        templates: Optional[TemplateRegistry] = None,
    ):
        self.gateway = gateway
        self.config = config
        self.templates = templates or TemplateRegistry()
        self.judge = Judge(gateway, config, self.templates)

    def embed(self, atoms: Sequence[KnowledgeAtom]) -> list[KnowledgeAtom]:
        if not atoms:
            return []
        batch = self.gateway.embed([a.text for a in atoms], self.config.embed_model_id)
        return [a.with_embedding(v) for a, v in zip(atoms, batch.vectors)]

    def _judge_pair(self, cand: KnowledgeAtom, nb: KnowledgeAtom) -> JudgeCall:
        return self.judge.redundant(cand.text, nb.text)

    def deduplicate(
        self, pool: Sequence[KnowledgeAtom], state: RunState, turn: Optional[int] = None
    ) -> tuple[list[KnowledgeAtom], list[DedupDecision]]:
        """Embed a pool in one batched call and insert it in order."""
        embedded = self.embed([a for a in pool if a.embedding is None])
        it = iter(embedded)
        pool = [a if a.embedding is not None else next(it) for a in pool]
        results: dict[str, tuple[DedupDecision, KnowledgeAtom]] = {}
        deferred = []
        for atom in pool:
            try:
                decision, updated, call = dedup_insert(atom, state.accepted, self.config, self._judge_pair)
            except JudgeUnavailableError as exc:
                log.warning("judge unavailable for %s, deferring: %s", atom.atom_id, exc)
                deferred.append(atom)
                continue
            results[atom.atom_id] = self._record(decision, updated, call, state, turn)
        for atom in deferred:
            try:
                decision, updated, call = dedup_insert(atom, state.accepted, self.config, self._judge_pair)
            except JudgeUnavailableError as exc:
                raise FailedAdjudicationError(f"could not adjudicate {atom.atom_id}: {exc}") from exc
            results[atom.atom_id] = self._record(decision, updated, call, state, turn)
        ordered = [results[a.atom_id] for a in pool]
        return [u for _, u in ordered], [d for d, _ in ordered]

    def _record(self, decision, updated, call, state: RunState, turn):
        tid = state.log_transcript(call) if call is not None else None
        if tid:
            decision = dataclasses.replace(decision, transcript_id=tid)
        state.log_decision(
            "dedup",
            turn,
            {
                "candidate_atom_id": decision.candidate_atom_id,
                "outcome": decision.outcome,
                "matched_atom_id": decision.matched_atom_id,
                "similarity": decision.similarity,
                "judge_verdict": decision.judge_verdict,
                "transcript_id": tid,
            },
        )
        return decision, updated

    def audit_atoms(
        self, atoms: Sequence[KnowledgeAtom], topic: str, state: RunState, turn: Optional[int] = None
    ) -> tuple[list[KnowledgeAtom], list[AuditDecision]]:
        """Audit unique atoms concurrently; log results in input order."""
        if not atoms:
            return [], []

        def one(atom):
            try:
                return self.judge.audit(atom.text, topic)
            except GatewayError as exc:
                return exc

        workers = min(self.gateway.concurrency, len(atoms))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            calls = list(pool.map(one, atoms))
        out, decisions = [], []
        for atom, call in zip(atoms, calls):
            if isinstance(call, Exception):
                log.error("audit unavailable for %s: %s", atom.atom_id, call)
                state.incomplete_audit = True
                out.append(atom)
                continue
            tid = state.log_transcript(call)
            verdict = "valid" if call.verdict == "YES" else "invalid"
            updated = transition(atom, "valid" if verdict == "valid" else "rejected_audit")
            state.accepted.replace(updated)
            decision = AuditDecision(atom.atom_id, verdict, tid, call.flagged)
            state.log_decision(
                "audit", turn,
                {"atom_id": atom.atom_id, "verdict": verdict, "transcript_id": tid, "flagged": call.flagged},
            )
            out.append(updated)
            decisions.append(decision)
        return out, decisions

    def process_turn_pool(
        self, pool: Sequence[KnowledgeAtom], state: RunState, topic: str, turn: Optional[int] = None
    ) -> PoolResult:
        if not pool:
            return PoolResult([], [], [], [])
        atoms, dedup = self.deduplicate(pool, state, turn)
        novel_idx = [i for i, d in enumerate(dedup) if d.is_novel]
        audited, audits = self.audit_atoms([atoms[i] for i in novel_idx], topic, state, turn)
        for i, a in zip(novel_idx, audited):
            atoms[i] = a
        return PoolResult(atoms, audited, dedup, audits)


@dataclass
class UnionResult:
    atoms: list[KnowledgeAtom]  # union representatives
    membership: dict[str, frozenset[str]]  # representative id -> contributing models
    decisions: list[dict]

    def __len__(self) -> int:
        return len(self.atoms)

    def covered_by(self, model_id: str) -> int:
        return sum(1 for models in self.membership.values() if model_id in models)


def build_union(
    model_sets: Mapping[str, Sequence[KnowledgeAtom]], processor: KnowledgeProcessor
) -> UnionResult:
    """Pool valid sets in (model_id, atom_id) order and deduplicate once more."""
    if len(model_sets) < 2:
        raise ValueError("a union needs at least two model sets")
    ordered = [
        dataclasses.replace(a, status="raw", merged_into=None)
        for model in sorted(model_sets)
        for a in sorted(model_sets[model], key=lambda a: a.atom_id)
    ]
    if len({a.atom_id for a in ordered}) != len(ordered):
        raise ValueError("atom ids collide across model sets")
    state = RunState()
    atoms, decisions = processor.deduplicate(ordered, state)
    owner = {a.atom_id: a.source_model_id for a in ordered}
    members: dict[str, set[str]] = {}
    reps = []
    for atom, d in zip(atoms, decisions):
        if d.is_novel:
            members[atom.atom_id] = {owner[atom.atom_id]}
            reps.append(atom)
        else:
            members[d.matched_atom_id].add(owner[atom.atom_id])
    return UnionResult(reps, {k: frozenset(v) for k, v in members.items()}, state.decisions)
