"""Deterministic stand-in for a black-box model with a known fact corpus.

The corpus is a topic tree whose leaves hold synthetic facts.  Each fact has a
Zipf popularity weight and a few paraphrase variants.  Responses sample facts
by popularity; prompts naming a sub-topic narrow the scope and flatten the
distribution.  This is a modelling choice for offline testing, not a claim
about how real models retrieve.

The same backend answers judge prompts with exact ground truth and serves a
64-dimensional embedder in which paraphrases of one fact sit close together.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import KBProbeError, KnowledgeAtom
from .gateway import ChatRequest, ChatResponse, estimate_tokens

SIM_PREFIX = "sim:"
DIM = 64
FULL_SCOPE_EXPONENT = 1.0
LEAF_EXPONENT = 0.3
# leaf-direction weight and paraphrase offset: same-leaf facts land around 0.6
# cosine (a few percent inside the judge zone), same-fact variants
# stay above 0.937 cosine of each other and about 0.98 of the canonical vector
LEAF_MIX = 1.3
PARAPHRASE_EPS = 0.18
MAX_CROSS_FACT_COS = 0.88

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "pl", "gr", "st", "dr", "kl", "sn"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "eo", "ou"]
_LABEL_HEADS = ["Q", "X", "V", "Z", "J", "Y", "W", "K"]
_LABEL_NOUNS = [
    "Dynamics", "Topology", "Calculus", "Networks", "Kernels", "Geometry", "Estimation",
    "Lattices", "Flows", "Operators", "Fields", "Manifolds", "Spectra", "Automata",
    "Codecs", "Schedulers", "Filters", "Solvers", "Ensembles", "Encoders",
]
_VERBS = ["bounds", "regulates", "doubles", "halves", "stabilizes", "dampens", "amplifies", "limits", "shifts", "scales"]
_UNITS = ["cycles", "epochs", "layers", "units", "bits", "steps", "shards", "tokens"]
_FILLERS = [
    "This is important to understand.",
    "Deep learning is useful.",
    "Overview",
    "There are many aspects to consider here.",
    "The field has grown rapidly in recent years.",
    "Key Concepts:",
    "and the",
]
_ROLES = ["researcher", "engineer", "theorist", "practitioner", "historian", "educator", "auditor", "consultant"]


class ForeignAtomError(KBProbeError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    """The six generator arguments; regenerating from them reproduces the corpus."""

    seed: int = 7
    branching: int = 3
    depth: int = 2
    facts_per_leaf: int = 20
    zipf_s: float = 1.1
    paraphrases_per_fact: int = 2

    def __post_init__(self):
        for name in ("branching", "depth", "facts_per_leaf", "paraphrases_per_fact"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.zipf_s <= 0:
            raise ValueError("zipf_s must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**d)

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "CorpusSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TopicNode:
    label: str
    path: tuple[str, ...]
    children: tuple[int, ...]
    leaves: tuple[int, ...]  # indices of leaves under this node (itself if a leaf)


@dataclass(frozen=True)
class Fact:
    fact_id: int
    leaf: int
    variants: tuple[str, ...]
    weight: float


@dataclass
class SimCorpus:
    spec: CorpusSpec
    nodes: list[TopicNode]  # nodes[0] is the root
    leaf_nodes: list[int]  # node index of each leaf
    facts: list[Fact]
    variant_vectors: np.ndarray = field(repr=False)  # (facts, paraphrases, DIM)
    canonical_vectors: np.ndarray = field(repr=False)
    text_index: dict[str, tuple[int, int]] = field(repr=False)

    @property
    def total_fact_count(self) -> int:
        return len(self.facts)

    @property
    def leaf_count(self) -> int:
        return len(self.leaf_nodes)

    def facts_in_leaf(self, leaf: int) -> list[Fact]:
        per = self.spec.facts_per_leaf
        return self.facts[leaf * per : (leaf + 1) * per]

    def fact_id_of(self, text: str) -> Optional[int]:
        hit = self.text_index.get(text)
        return hit[0] if hit else None

    def labels(self) -> list[str]:
        return [n.label for n in self.nodes[1:]]

    def child_labels(self, node: int) -> list[str]:
        return [self.nodes[c].label for c in self.nodes[node].children]

    def node_by_label(self, label: str) -> Optional[int]:
        for i, n in enumerate(self.nodes):
            if i and n.label.lower() == label.strip().lower():
                return i
        return None

    def matched_leaves(self, prompt: str) -> list[int]:
        """Leaves whose own or ancestor label occurs in the prompt."""
        low = prompt.lower()
        hit: set[int] = set()
        for n in self.nodes[1:]:
            if n.label.lower() in low:
                hit.update(n.leaves)
        return sorted(hit)

    def digest(self) -> str:
        h = hashlib.sha256()
        for f in self.facts:
            h.update("|".join(f.variants).encode())
        return h.hexdigest()


def _rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def _word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(
        _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(syllables)
    )


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _fact_texts(rng: np.random.Generator, p: int) -> tuple[str, ...]:
    adj, n1, n2 = _word(rng, 2), _word(rng, 3), _word(rng, 3)
    verb = _VERBS[rng.integers(len(_VERBS))]
    unit = _UNITS[rng.integers(len(_UNITS))]
    k = int(rng.integers(2, 1000))
    forms = [
        f"The {adj} {n1} of {n2} {verb} {k} {unit}.",
        f"In {n2}, the {adj} {n1} {verb} {k} {unit}.",
        f"For {n2}, {k} {unit} is what the {adj} {n1} {verb}.",
        f"Within {n2} systems, the {adj} {n1} {verb} exactly {k} {unit}.",
    ]
    out = []
    for i in range(p):
        base = forms[i % len(forms)]
        rounds = i // len(forms)
        out.append(base if rounds == 0 else f"Restated ({rounds}): {base}")
    return tuple(out)


def _random_orthogonal(rng: np.random.Generator, c: np.ndarray) -> np.ndarray:
    u = rng.standard_normal(DIM)
    u -= (u @ c) * c
    return _unit(u)


def generate_corpus(
    seed: int = 7,
    branching: int = 3,
    depth: int = 2,
    facts_per_leaf: int = 20,
    zipf_s: float = 1.1,
    paraphrases_per_fact: int = 2,
) -> SimCorpus:
    spec = CorpusSpec(seed, branching, depth, facts_per_leaf, zipf_s, paraphrases_per_fact)
    rng = _rng("corpus", *spec.to_dict().values())

    # topic tree, breadth first
    labels_used: list[str] = []

    def new_label() -> str:
        while True:
            head = _LABEL_HEADS[rng.integers(len(_LABEL_HEADS))]
            cand = f"{head}{_word(rng, 2)} {_LABEL_NOUNS[rng.integers(len(_LABEL_NOUNS))]}"
            low = cand.lower()
            if all(low not in u.lower() and u.lower() not in low for u in labels_used):
                labels_used.append(cand)
                return cand

    nodes: list[dict] = [{"label": "", "path": (), "children": []}]
    frontier = [0]
    for _ in range(depth):
        nxt = []
        for parent in frontier:
            for _ in range(branching):
                label = new_label()
                nodes.append({"label": label, "path": nodes[parent]["path"] + (label,), "children": []})
                nodes[parent]["children"].append(len(nodes) - 1)
                nxt.append(len(nodes) - 1)
        frontier = nxt
    leaf_nodes = frontier

    # facts, with rejection so distinct facts never look like paraphrases
    n_leaves = len(leaf_nodes)
    total = n_leaves * facts_per_leaf
    ranks = rng.permutation(total) + 1
    weights = ranks.astype(np.float64) ** (-zipf_s)
    p = paraphrases_per_fact
    variant_vecs = np.zeros((total, p, DIM))
    canon = np.zeros((total, DIM))
    flat = np.zeros((total * p, DIM))
    facts: list[Fact] = []
    text_index: dict[str, tuple[int, int]] = {}
    low_labels = [lab.lower() for lab in labels_used]
    for leaf in range(n_leaves):
        leaf_dir = _unit(rng.standard_normal(DIM))
        for j in range(facts_per_leaf):
            fid = leaf * facts_per_leaf + j
            while True:
                texts = _fact_texts(rng, p)
                if any(t in text_index for t in texts) or len(set(texts)) < p:
                    continue
                if any(lab in t.lower() for t in texts for lab in low_labels):
                    continue
                break
            filled = fid * p
            for _ in range(200):
                c = _unit(LEAF_MIX * leaf_dir + _unit(rng.standard_normal(DIM)))
                vs = np.stack(
                    [_unit(c + PARAPHRASE_EPS * _random_orthogonal(rng, c)) for _ in range(p)]
                )
                if filled == 0 or float(np.max(flat[:filled] @ vs.T)) < MAX_CROSS_FACT_COS:
                    break
            else:
                raise RuntimeError("could not place a fact vector; corpus too dense")
            canon[fid] = c
            variant_vecs[fid] = vs
            flat[filled : filled + p] = vs
            for vi, t in enumerate(texts):
                text_index[t] = (fid, vi)
            facts.append(Fact(fid, leaf, texts, float(weights[fid])))

    leaf_pos = {node: i for i, node in enumerate(leaf_nodes)}

    def leaves_under(i: int) -> tuple[int, ...]:
        if not nodes[i]["children"]:
            return (leaf_pos[i],)
        return tuple(x for c in nodes[i]["children"] for x in leaves_under(c))

    topic_nodes = [
        TopicNode(n["label"], n["path"], tuple(n["children"]), leaves_under(i))
        for i, n in enumerate(nodes)
    ]
    return SimCorpus(spec, topic_nodes, leaf_nodes, facts, variant_vecs, canon, text_index)


def corpus_from_spec(spec: CorpusSpec) -> SimCorpus:
    return generate_corpus(**spec.to_dict())


def sim_embed(text: str, corpus: SimCorpus) -> np.ndarray:
    hit = corpus.text_index.get(text)
    if hit is not None:
        return corpus.variant_vectors[hit[0], hit[1]].copy()
    return _unit(_rng("unknown-text", text).standard_normal(DIM))


@dataclass(frozen=True)
class SimModel:
    """Per-model behaviour knobs over a shared corpus."""

    name: str = "demo"
    coverage: float = 1.0  # fraction of facts this model can ever emit
    noise_rate: float = 0.0  # chance a bullet is filler instead of a fact
    overcount: int = 0  # extra list items in taxonomy answers (miscount fixture)
    duplicate_profiles: bool = False  # repeat one persona (dedup fixture)

    def knows(self, fact_id: int) -> bool:
        if self.coverage >= 1.0:
            return True
        return _rng("coverage", self.name, fact_id).random() < self.coverage


@dataclass(frozen=True)
class SimResponse:
    text: str
    emitted_fact_ids: tuple[Optional[int], ...]  # None marks a filler bullet


def focus_exponent(matched: int, total: int) -> float:
    if matched == 0 or matched >= total:
        return FULL_SCOPE_EXPONENT
    if total == 1:
        return LEAF_EXPONENT
    return LEAF_EXPONENT + (FULL_SCOPE_EXPONENT - LEAF_EXPONENT) * (matched - 1) / (total - 1)


def respond(
    prompt: str,
    corpus: SimCorpus,
    rng: np.random.Generator,
    model: SimModel = SimModel(),
) -> SimResponse:
    """Sample 5-15 facts, narrowing to the leaves the prompt names."""
    if not prompt.strip():
        raise ValueError("prompt is empty")
    leaves = corpus.matched_leaves(prompt)
    exponent = focus_exponent(len(leaves), corpus.leaf_count)
    if not leaves:
        leaves = list(range(corpus.leaf_count))
    pool = [f for leaf in leaves for f in corpus.facts_in_leaf(leaf) if model.knows(f.fact_id)]
    n = int(rng.integers(5, 16))
    lines: list[str] = []
    ids: list[Optional[int]] = []
    if pool:
        w = np.array([f.weight for f in pool]) ** exponent
        picks = rng.choice(len(pool), size=min(n, len(pool)), replace=False, p=w / w.sum())
        for i in picks:
            fact = pool[int(i)]
            variant = int(rng.integers(len(fact.variants)))
            if model.noise_rate and rng.random() < model.noise_rate:
                lines.append(_FILLERS[int(rng.integers(len(_FILLERS)))])
                ids.append(None)
            else:
                lines.append(fact.variants[variant])
                ids.append(fact.fact_id)
    return SimResponse("\n".join(f"- {s}" for s in lines), tuple(ids))


def true_recall(atoms: Iterable[KnowledgeAtom], corpus: SimCorpus) -> float:
    return len(fact_ids(atoms, corpus)) / corpus.total_fact_count


def fact_ids(atoms: Iterable[KnowledgeAtom], corpus: SimCorpus) -> set[int]:
    ids = set()
    for a in atoms:
        fid = corpus.fact_id_of(a.text)
        if fid is None:
            raise ForeignAtomError(f"atom {a.atom_id} has no ground-truth fact id: {a.text!r}")
        ids.add(fid)
    return ids


_RE_COUNT = re.compile(r"exactly (\d+)")
_RE_EXPERTS = re.compile(r"Identify (\d+) distinct types of experts")
_RE_SUBTOPIC = re.compile(r"the sub-topic '(.+?)' can be further divided")
_RE_EXCLUDE = re.compile(r"Do not repeat any of: (.*)\.\s*$", re.S)
_RE_POINT_A = re.compile(r"^Point A: (.*)$", re.M)
_RE_POINT_B = re.compile(r"^Point B: (.*)$", re.M)
_RE_KP = re.compile(r'Knowledge Point: "(.*)"', re.S)


def _excluded(prompt: str) -> set[str]:
    m = _RE_EXCLUDE.search(prompt)
    return {s.strip().lower() for s in m.group(1).split(";")} if m else set()


class SimBackend:
    """Gateway backend serving every `sim:<name>` model id from one corpus."""

    def __init__(self, corpus: SimCorpus, models: Optional[dict[str, SimModel]] = None, seed: int = 0):
        self.corpus = corpus
        self.models = dict(models or {})
        self.seed = seed

    def model(self, model_id: str) -> SimModel:
        name = model_id[len(SIM_PREFIX) :] if model_id.startswith(SIM_PREFIX) else model_id
        return self.models.get(name) or SimModel(name=name)

    def chat(self, request: ChatRequest) -> ChatResponse:
        prompt = request.prompt
        model = self.model(request.model_id)
        rng = _rng("chat", self.seed, model.name, request.seed, prompt)
        text = self.answer(prompt, model, rng)
        return ChatResponse(text, estimate_tokens(prompt), estimate_tokens(text))

    def answer(self, prompt: str, model: SimModel, rng: np.random.Generator) -> str:
        if _RE_POINT_A.search(prompt) and _RE_POINT_B.search(prompt):
            a = self.corpus.fact_id_of(_RE_POINT_A.search(prompt).group(1).strip())
            b = self.corpus.fact_id_of(_RE_POINT_B.search(prompt).group(1).strip())
            return "YES" if a is not None and a == b else "NO"
        kp = _RE_KP.findall(prompt)
        if kp:
            return "YES" if self.corpus.fact_id_of(kp[-1]) is not None else "NO"
        m = _RE_EXPERTS.search(prompt)
        if m:
            return self._profiles(int(m.group(1)), _excluded(prompt), model)
        m = _RE_SUBTOPIC.search(prompt)
        if m and _RE_COUNT.search(prompt):
            return self._categories(m.group(1), int(_RE_COUNT.search(prompt).group(1)), _excluded(prompt), model)
        if "sub-categories" in prompt and _RE_COUNT.search(prompt):
            return self._categories(None, int(_RE_COUNT.search(prompt).group(1)), _excluded(prompt), model)
        return respond(prompt, self.corpus, rng, model).text

    def _categories(self, parent: Optional[str], count: int, exclude: set[str], model: SimModel) -> str:
        node = 0 if parent is None else self.corpus.node_by_label(parent)
        known = self.corpus.child_labels(node) if node is not None else []
        prefix = f"{parent} " if parent else ""
        out = [lab for lab in known if lab.lower() not in exclude]
        k = 1
        while len(out) < count + model.overcount:
            cand = f"{prefix}Extension {k}"
            if cand.lower() not in exclude and cand not in out:
                out.append(cand)
            k += 1
        return "\n".join(f"- {lab}" for lab in out[: count + model.overcount])

    def _profiles(self, count: int, exclude: set[str], model: SimModel) -> str:
        # each persona is a niche specialist: leaves first, then broader categories
        anchors = [self.corpus.nodes[i].label for i in self.corpus.leaf_nodes]
        anchors += [self.corpus.nodes[c].label for c in self.corpus.nodes[0].children if c not in self.corpus.leaf_nodes]
        out: list[str] = []
        i = 0
        while len(out) < count:
            role = _ROLES[i % len(_ROLES)]
            desc = f"A {role} specializing in {anchors[i % len(anchors)]} who studies its open problems."
            if i >= len(anchors) * len(_ROLES):
                desc = f"A {role} specializing in {anchors[i % len(anchors)]}, variant {i}."
            if desc.lower() not in exclude:
                out.append(desc)
            i += 1
        if model.duplicate_profiles and len(out) > 1 and not exclude:
            out[-1] = out[0]
        return "\n".join(f"- {d}" for d in out)

    def embed(self, texts: Sequence[str], model_id: str) -> tuple[np.ndarray, Optional[int]]:
        vecs = np.stack([sim_embed(t, self.corpus) for t in texts])
        return vecs, sum(estimate_tokens(t) for t in texts)
