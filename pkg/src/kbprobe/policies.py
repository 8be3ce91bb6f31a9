"""Exploration policies and the shared turn loop.

Parallel policies (taxonomy leaves, expert personas) run one synchronized
round per global turn: fan out every active sub-agent, join, then process the
pooled candidates as a single turn.
"""

from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal, Optional, Sequence

from .core import (
    EmptyTextError,
    KBProbeError,
    KnowledgeAtom,
    Origin,
    RunRecord,
    SaturationConfig,
    TurnRecord,
    check_saturation,
    make_turn,
    mint_atom,
)
from .gateway import EXTRACTION_TEMPERATURE, JUDGE_TEMPERATURE, ChatRequest, Gateway, GatewayError
from .processor import KnowledgeProcessor, RunState
from .prompts import TemplateRegistry, extend_history, format_points, repair_suffix

log = logging.getLogger(__name__)

PolicyId = Literal["sequential", "reflective", "taxonomy", "multi_perspective"]
POLICY_IDS = ("sequential", "reflective", "taxonomy", "multi_perspective")
REPAIR_ATTEMPTS = 3
DEACTIVATE_AFTER = 2  # consecutive zero-novel rounds before a leaf is dropped

_BULLET = re.compile(r"^\s*[-*•]\s*(.*)$")


class TaxonomyInductionError(KBProbeError):
    pass


class ProfileGenerationError(KBProbeError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    policy_id: PolicyId
    W: Optional[int] = None
    D_max: Optional[int] = None
    N: Optional[int] = None
    saturation: SaturationConfig = SaturationConfig()

    def __post_init__(self):
        if self.policy_id not in POLICY_IDS:
            raise ValueError(f"unknown policy {self.policy_id!r}")
        if self.policy_id == "taxonomy":
            if self.W is None or self.D_max is None or self.N is not None:
                raise ValueError("taxonomy takes W and D_max only")
            if self.W < 2 or self.D_max < 1:
                raise ValueError("need W >= 2 and D_max >= 1")
        elif self.policy_id == "multi_perspective":
            if self.N is None or self.W is not None or self.D_max is not None:
                raise ValueError("multi_perspective takes N only")
            if self.N < 1:
                raise ValueError("need N >= 1")
        elif any(v is not None for v in (self.W, self.D_max, self.N)):
            raise ValueError(f"{self.policy_id} takes no hyperparameters")

    def params(self) -> dict:
        return {k: v for k, v in (("W", self.W), ("D_max", self.D_max), ("N", self.N)) if v is not None}


PRESETS: dict[str, PolicyConfig] = {
    "P2_Sequential": PolicyConfig("sequential"),
    "P3_Reflection": PolicyConfig("reflective"),
    "P4_Taxonomy_L2W2": PolicyConfig("taxonomy", W=2, D_max=2),
    "P4_Taxonomy_L3W3": PolicyConfig("taxonomy", W=3, D_max=2),
    "P4_Taxonomy_L5W5": PolicyConfig("taxonomy", W=5, D_max=2),
    "P5_MultiProfile_N3": PolicyConfig("multi_perspective", N=3),
    "P5_MultiProfile_N10": PolicyConfig("multi_perspective", N=10),
    "P5_MultiProfile_N20": PolicyConfig("multi_perspective", N=20),
}

BASELINE_PRESET = "P4_Taxonomy_L2W2"


def preset(name: str, saturation: Optional[SaturationConfig] = None) -> PolicyConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown pipeline {name!r}; valid presets: {', '.join(PRESETS)}") from None
    if saturation is not None:
        cfg = PolicyConfig(cfg.policy_id, cfg.W, cfg.D_max, cfg.N, saturation)
    return cfg


@dataclass
class TaxonomyTree:
    root: str
    children: dict[tuple[str, ...], list[str]] = field(default_factory=dict)
    leaves: list[tuple[str, ...]] = field(default_factory=list)

    def check(self, W: int, D_max: int) -> None:
        assert len(self.leaves) == W**D_max
        for path, kids in self.children.items():
            assert len(kids) == W, f"{path} has {len(kids)} children"
            assert len({k.lower() for k in kids}) == W and all(k.strip() for k in kids)


@dataclass(frozen=True)
class ExpertProfile:
    index: int
    description: str

    def __post_init__(self):
        if not self.description.strip():
            raise ValueError("profile description is empty")


def parse_bullets(text: str) -> list[str]:
    """Bullet lines ('-', '*' or '•' markers) with the marker stripped, in order."""
    out = []
    for line in text.splitlines():
        m = _BULLET.match(line)
        if m:
            out.append(m.group(1).strip())
    return out


def _unique_keep_order(items: Sequence[str], seen: Optional[list[str]] = None) -> list[str]:
    out = list(seen or [])
    keys = {s.lower() for s in out}
    for s in items:
        if s and s.lower() not in keys:
            keys.add(s.lower())
            out.append(s)
    return out


class _TurnLoop:
    """Bookkeeping for one run: minting, processing, turn records, costs."""

    def __init__(self, explorer: "Explorer", cfg: PolicyConfig, topic: str, model_id: str, run_id: str):
        self.ex = explorer
        self.cfg = cfg
        self.topic = topic
        self.model_id = model_id
        self.run_id = run_id
        self.state = RunState()
        self.atoms: list[KnowledgeAtom] = []
        self.turns: list[TurnRecord] = []
        self.costs: list[int] = []
        self._last_ledger = (0, 0)
        self.settings: dict = {}

    @property
    def unique_texts(self) -> list[str]:
        return [a.text for a in self.state.accepted.atoms]

    def commit(self, t: int, candidates: Sequence[tuple[str, Origin]]):
        pool = []
        for text, origin in candidates:
            try:
                pool.append(
                    mint_atom(text, origin, run_id=self.run_id, ordinal=len(pool),
                              model_id=self.model_id, topic_id=self.topic)
                )
            except EmptyTextError:
                continue
        result = self.ex.processor.process_turn_pool(pool, self.state, self.topic, turn=t)
        gen, emb = self.ex.gateway.cost_ledger()
        prior = self.turns[-1].cumulative_unique if self.turns else 0
        rec = make_turn(
            t, len(pool), result.novel_count, prior,
            generation_tokens=gen - self._last_ledger[0],
            embedding_tokens=emb - self._last_ledger[1],
        )
        reason = check_saturation(rec, self.turns, self.cfg.saturation)
        rec = TurnRecord(**{**asdict(rec), "stop_reason": reason})
        self._last_ledger = (gen, emb)
        self.turns.append(rec)
        self.costs.append(gen + emb)
        self.atoms.extend(result.atoms)
        return result, reason

    def record(self, status: str, started: float) -> RunRecord:
        if status == "completed" and self.state.incomplete_audit:
            status = "incomplete_audit"
        settings = {
            "temperature": self.ex.temperature,
            "judge_temperature": JUDGE_TEMPERATURE,
            "dedup": asdict(self.ex.processor.config),
            **self.ex.extra_settings,
            **self.settings,
        }
        return RunRecord(
            run_id=self.run_id,
            policy_id=self.cfg.policy_id,
            policy_params=self.cfg.params(),
            model_id=self.model_id,
            topic_id=self.topic,
            saturation_config=self.cfg.saturation,
            turn_records=list(self.turns),
            atoms=list(self.atoms),
            total_cost_tokens=list(self.costs),
            wall_clock=time.perf_counter() - started,
            status=status,
            settings=settings,
            decisions=self.state.decisions,
            transcripts=self.state.transcripts,
        )


class Explorer:
    """Runs exploration policies against one gateway and processor."""

    def __init__(
        self,
        gateway: Gateway,
        processor: Optional[KnowledgeProcessor] = None,
        templates: Optional[TemplateRegistry] = None,
        temperature: float = EXTRACTION_TEMPERATURE,
        max_output_tokens: int = 2048,
        extra_settings: Optional[dict] = None,
    ):
        self.gateway = gateway
        self.templates = templates or (processor.templates if processor else TemplateRegistry())
        self.processor = processor or KnowledgeProcessor(gateway, templates=self.templates)
        self.temperature = temperature
        self.max_output_tokens = max_output_tokens
        self.extra_settings = dict(extra_settings or {})

    # -- model calls -------------------------------------------------------

    def ask(self, model_id: str, prompt: str, seed: Optional[int] = None) -> str:
        req = ChatRequest.user(
            model_id, prompt, temperature=self.temperature,
            max_output_tokens=self.max_output_tokens, seed=seed,
        )
        return self.gateway.chat(req).text

    def fan_out(self, model_id: str, prompts: Sequence[str], seed: int) -> list[str]:
        if len(prompts) == 1:
            return [self.ask(model_id, prompts[0], seed)]
        workers = min(self.gateway.concurrency, len(prompts))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda p: self.ask(model_id, p, seed), prompts))

    def _ask_for_list(
        self,
        model_id: str,
        count: int,
        render: Callable[[int], str],
        error: type[KBProbeError],
        what: str,
    ) -> list[str]:
        """Ask for exactly `count` items; re-ask once, then ask for the shortfall."""
        items: list[str] = []
        for attempt in range(REPAIR_ATTEMPTS):
            if attempt < 2:
                prompt = render(count)
            else:
                prompt = render(count - len(items)) + repair_suffix(items)
            got = _unique_keep_order(parse_bullets(self.ask(model_id, prompt, seed=attempt)))
            if attempt == 0 and len(got) == count:
                return got
            items = _unique_keep_order(got, items)
            if attempt > 0 and len(items) >= count:
                return items[:count]
            log.info("%s: wanted %d items, have %d after attempt %d", what, count, len(items), attempt + 1)
        raise error(f"{what}: only {len(items)} of {count} items after {REPAIR_ATTEMPTS} attempts")

    # -- scaffolding -------------------------------------------------------

    def build_taxonomy(self, topic: str, model_id: str, W: int, D_max: int) -> TaxonomyTree:
        if W < 2 or D_max < 1:
            raise ValueError("need W >= 2 and D_max >= 1")
        tree = TaxonomyTree(root=topic)
        tr = self.templates

        def expand(path: tuple[str, ...]) -> list[str]:
            if not path:
                render = lambda k: tr.render("taxonomy.level1", query=topic, W=k)
            else:
                render = lambda k: tr.render("taxonomy.level2", query=topic, category=path[-1], W=k)
            return self._ask_for_list(model_id, W, render, TaxonomyInductionError, f"children of {path or topic!r}")

        level = [()]
        for _ in range(D_max):
            if len(level) == 1:
                kids = [expand(level[0])]
            else:
                with ThreadPoolExecutor(max_workers=min(self.gateway.concurrency, len(level))) as pool:
                    kids = list(pool.map(expand, level))
            nxt = []
            for path, labels in zip(level, kids):
                tree.children[path] = labels
                nxt += [path + (lab,) for lab in labels]
            level = nxt
        tree.leaves = level
        return tree

    def generate_profiles(self, topic: str, model_id: str, N: int) -> list[ExpertProfile]:
        if N < 1:
            raise ValueError("need N >= 1")
        render = lambda k: self.templates.render("profiles.generate", query=topic, N=k)
        descs = self._ask_for_list(model_id, N, render, ProfileGenerationError, "expert profiles")
        return [ExpertProfile(i + 1, d) for i, d in enumerate(descs)]

    # -- policies ----------------------------------------------------------

    def run(self, cfg: PolicyConfig, topic: str, model_id: str, run_id: str) -> RunRecord:
        fn = {
            "sequential": self.run_sequential,
            "reflective": self.run_reflective,
            "taxonomy": self.run_taxonomy,
            "multi_perspective": self.run_multi_perspective,
        }[cfg.policy_id]
        return fn(topic, model_id, cfg, run_id)

    def _drive(self, cfg, topic, model_id, run_id, setup, step) -> RunRecord:
        """Common skeleton: setup once, then step(loop, t) until a stop reason."""
        self.gateway.start_run()
        started = time.perf_counter()
        loop = _TurnLoop(self, cfg, topic, model_id, run_id)
        ctx = setup(loop)
        for t in range(1, cfg.saturation.max_turns + 1):
            try:
                reason = step(loop, ctx, t)
            except (GatewayError, KBProbeError) as exc:
                if isinstance(exc, (TaxonomyInductionError, ProfileGenerationError)):
                    raise
                log.error("run %s aborted at turn %d: %s", run_id, t, exc)
                return loop.record("aborted", started)
            if reason != "none":
                break
        return loop.record("completed", started)

    def run_sequential(self, topic, model_id, cfg: PolicyConfig, run_id: str) -> RunRecord:
        def step(loop, ctx, t):
            if t == 1:
                prompt = self.templates.render("sequential.t1", query=topic)
            else:
                prompt = self.templates.render("sequential.tn", history=ctx["history"])
            text = self.ask(model_id, prompt, seed=t)
            origin = Origin(cfg.policy_id, t)
            _, reason = loop.commit(t, [(c, origin) for c in parse_bullets(text)])
            ctx["history"] = extend_history(ctx["history"], prompt, text)
            return reason

        return self._drive(cfg, topic, model_id, run_id, lambda loop: {"history": ""}, step)

    def run_reflective(self, topic, model_id, cfg: PolicyConfig, run_id: str) -> RunRecord:
        def step(loop, ctx, t):
            if t == 1:
                prompt = self.templates.render("sequential.t1", query=topic)
            else:
                points = loop.unique_texts
                prompt = self.templates.render(
                    "reflective.tn", query=topic, N=len(points), points_str=format_points(points)
                )
            text = self.ask(model_id, prompt, seed=t)
            origin = Origin(cfg.policy_id, t)
            _, reason = loop.commit(t, [(c, origin) for c in parse_bullets(text)])
            return reason

        return self._drive(cfg, topic, model_id, run_id, lambda loop: None, step)

    def run_taxonomy(self, topic, model_id, cfg: PolicyConfig, run_id: str) -> RunRecord:
        def setup(loop):
            tree = self.build_taxonomy(topic, model_id, cfg.W, cfg.D_max)
            loop.settings["taxonomy_leaves"] = [list(p) for p in tree.leaves]
            loop.settings["leaf_novel"] = {" / ".join(p): [] for p in tree.leaves}
            return {
                "leaves": tree.leaves,
                "history": {p: "" for p in tree.leaves},
                "active": {p: True for p in tree.leaves},
            }

        def step(loop, ctx, t):
            active = [p for p in ctx["leaves"] if ctx["active"][p]]
            prompts = []
            for path in active:
                if not ctx["history"][path]:
                    prompts.append(self.templates.render("taxonomy.leaf_t1", query=topic, leaf=path[-1]))
                else:
                    prompts.append(self.templates.render("taxonomy.leaf_tn", history=ctx["history"][path]))
            texts = self.fan_out(model_id, prompts, seed=t)
            candidates = []
            for path, text in zip(active, texts):
                origin = Origin(cfg.policy_id, t, leaf=path)
                candidates += [(c, origin) for c in parse_bullets(text)]
            result, reason = loop.commit(t, candidates)
            novel_by_leaf = {p: 0 for p in active}
            for a in result.novel:
                novel_by_leaf[a.origin.leaf] += 1
            for path, prompt, text in zip(active, prompts, texts):
                ctx["history"][path] = extend_history(ctx["history"][path], prompt, text)
                series = loop.settings["leaf_novel"][" / ".join(path)]
                series.append(novel_by_leaf[path])
                if len(series) >= DEACTIVATE_AFTER and not any(series[-DEACTIVATE_AFTER:]):
                    ctx["active"][path] = False
            loop.settings["inactive_leaves"] = [list(p) for p in ctx["leaves"] if not ctx["active"][p]]
            # a round in which every leaf is silent has n_t = 0 and so already stops on low_novel
            loop.settings["all_leaves_exhausted"] = not any(novel_by_leaf.values())
            return reason

        return self._drive(cfg, topic, model_id, run_id, setup, step)

    def run_multi_perspective(self, topic, model_id, cfg: PolicyConfig, run_id: str) -> RunRecord:
        def setup(loop):
            profiles = self.generate_profiles(topic, model_id, cfg.N)
            loop.settings["profiles"] = [p.description for p in profiles]
            return profiles

        def step(loop, profiles, t):
            snapshot = format_points(loop.unique_texts)
            prompts = [
                self.templates.render("profiles.extract", profile=p.description, query=topic, points_str=snapshot)
                for p in profiles
            ]
            texts = self.fan_out(model_id, prompts, seed=t)
            candidates = []
            for prof, text in zip(profiles, texts):
                origin = Origin(cfg.policy_id, t, profile=prof.index)
                candidates += [(c, origin) for c in parse_bullets(text)]
            _, reason = loop.commit(t, candidates)
            return reason

        return self._drive(cfg, topic, model_id, run_id, setup, step)
