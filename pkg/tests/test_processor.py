from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kbprobe.core import Origin, mint_atom
from kbprobe.gateway import ChatResponse, Gateway, ServerError
from kbprobe.processor import (
    AcceptedSet,
    DedupConfig,
    DedupDecision,
    FailedAdjudicationError,
    JudgeCall,
    KnowledgeProcessor,
    RunState,
    build_union,
    cosine,
    dedup_insert,
    parse_verdict,
    route,
)
from kbprobe.sim_oracle import SimBackend, generate_corpus, sim_embed
from oracles import brute_force_accepted, mint_pool, random_pool, unit


def raw_atom(i, vec, text=None):
    o = Origin("sequential", 1)
    a = mint_atom(text or f"atom {i}", o, run_id="b", ordinal=i, model_id="m", topic_id="T")
    return a.with_embedding(unit(vec))


# -- similarity and routing ---------------------------------------------------

def test_cosine_basics():
    v = unit([1, 2, 3])
    assert cosine(v, v) == pytest.approx(1.0)
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    with pytest.raises(ValueError):
        cosine(np.array([1.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        cosine(np.array([2.0, 0.0]), np.array([1.0, 0.0]))


@given(st.integers(0, 2**32 - 1))
def test_cosine_matches_exact_arithmetic(seed):
    rng = np.random.default_rng(seed)
    a, b = unit(rng.standard_normal(64)), unit(rng.standard_normal(64))
    exact = sum(Fraction(x) * Fraction(y) for x, y in zip(a.tolist(), b.tolist()))
    assert abs(cosine(a, b) - float(exact)) < 1e-9


@pytest.mark.parametrize(
    "s,path", [(0.65, "novel"), (0.70, "novel"), (0.71, "judge"), (0.92, "judge"), (0.93, "strict"), (0.95, "strict")]
)
def test_route_boundaries(s, path):
    assert route(s, DedupConfig()) == path
    assert route(None, DedupConfig()) == "novel"


def test_dedup_config_validation():
    with pytest.raises(ValueError):
        DedupConfig(strict_threshold=0.6, fuzzy_low=0.7)


def test_decision_invariants():
    with pytest.raises(ValueError):
        DedupDecision("a", "merged_strict", None, 0.95)
    with pytest.raises(ValueError):
        DedupDecision("a", "accepted_novel", "b", 0.5)
    assert DedupDecision("a", "kept_after_judge", "b", 0.8, "NO").is_novel


def test_parse_verdict():
    assert parse_verdict("YES") == "YES"
    assert parse_verdict(" no.") == "NO"
    assert parse_verdict("**Yes**") == "YES"
    assert parse_verdict("maybe") is None


# -- dedup_insert on constructed geometry -------------------------------------

def pair_at(s, dim=8):
    e1, e2 = np.eye(dim)[0], np.eye(dim)[1]
    return e1, s * e1 + np.sqrt(1 - s * s) * e2


@pytest.mark.parametrize(
    "s,outcome",
    [(0.65, "accepted_novel"), (0.80, "kept_after_judge"), (0.95, "merged_strict")],
)
def test_insert_outcomes(s, outcome):
    base, cand = pair_at(s)
    acc = AcceptedSet()
    acc.add(raw_atom(0, base).__class__(**{**raw_atom(0, base).__dict__, "status": "unique"}))
    calls = []

    def judge(c, n):
        calls.append((c.atom_id, n.atom_id))
        return JudgeCall("NO", "p", "NO")

    d, updated, _ = dedup_insert(raw_atom(1, cand), acc, DedupConfig(), judge)
    assert d.outcome == outcome
    assert bool(calls) == (outcome == "kept_after_judge")
    if outcome == "merged_strict":
        assert updated.status == "rejected_duplicate" and updated.merged_into == d.matched_atom_id
    else:
        assert updated.status == "unique" and len(acc) == 2


def test_judge_yes_merges():
    base, cand = pair_at(0.80)
    acc = AcceptedSet()
    first, _, _ = dedup_insert(raw_atom(0, base), acc, DedupConfig(), None)
    d, upd, _ = dedup_insert(raw_atom(1, cand), acc, DedupConfig(), lambda c, n: JudgeCall("YES", "p", "YES"))
    assert d.outcome == "merged_by_judge" and d.judge_verdict == "YES"
    assert upd.merged_into == first.candidate_atom_id


def test_nearest_neighbour_only_and_earliest_wins():
    e = np.eye(4)
    acc = AcceptedSet()
    for i in range(3):
        dedup_insert(raw_atom(i, e[0] if i < 2 else e[1]), acc, DedupConfig(strict_threshold=0.999, fuzzy_low=0.998), None)
    # atoms 0 and 1 share a vector, but 1 was kept only because thresholds are extreme
    nb, s = acc.nearest(unit(e[0]))
    assert nb.atom_id == acc.atoms[0].atom_id and s == pytest.approx(1.0)


# -- full processor on sim pools ----------------------------------------------

def test_two_identical_strings_count_once(processor, corpus):
    t = corpus.facts[0].variants[0]
    res = processor.process_turn_pool(mint_pool([t, t]), RunState(), "Deep Learning", turn=1)
    assert res.novel_count == 1
    assert [a.status for a in res.atoms] == ["valid", "rejected_duplicate"]


def test_empty_pool_makes_no_calls(corpus):
    g = Gateway(backends={"sim:": SimBackend(corpus)})
    res = KnowledgeProcessor(g).process_turn_pool([], RunState(), "T", turn=1)
    assert res.novel_count == 0
    assert g.cost_ledger() == (0, 0)


def test_audit_outcomes(processor, corpus):
    pool = mint_pool([corpus.facts[3].variants[0], "This is important to understand.", "garbled xq"])
    state = RunState()
    res = processor.process_turn_pool(pool, state, "Deep Learning", turn=1)
    assert [a.status for a in res.atoms] == ["valid", "rejected_audit", "rejected_audit"]
    audits = [d for d in state.decisions if d["type"] == "audit"]
    assert sorted(d["atom_id"] for d in audits) == sorted(a.atom_id for a in res.novel)
    assert all(d["transcript_id"] for d in audits)


def test_brute_force_oracle_equivalence(corpus):
    judged = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        texts = random_pool(corpus, rng)
        g = Gateway(backends={"sim:": SimBackend(corpus)})
        state = RunState()
        KnowledgeProcessor(g).deduplicate(mint_pool(texts), state, turn=1)
        got = [a.text for a in state.accepted.atoms]
        vecs = np.stack([sim_embed(t, corpus) for t in texts])
        ids = [corpus.fact_id_of(t) for t in texts]
        keep = brute_force_accepted(vecs, lambda i, j: ids[i] is not None and ids[i] == ids[j])
        assert got == [texts[i] for i in keep]
        judged += sum(1 for d in state.decisions if d["judge_verdict"])
    assert judged > 0


def test_accepted_pairs_respect_strict_threshold(corpus):
    rng = np.random.default_rng(5)
    texts = random_pool(corpus, rng) + random_pool(corpus, rng)
    g = Gateway(backends={"sim:": SimBackend(corpus)})
    state = RunState()
    KnowledgeProcessor(g).deduplicate(mint_pool(texts), state, turn=1)
    vecs = np.stack([a.embedding for a in state.accepted.atoms])
    S = vecs @ vecs.T
    np.fill_diagonal(S, -1)
    assert S.max() <= 0.92


class FailingJudge:
    """Sim backend whose judge calls fail a set number of times."""

    def __init__(self, corpus, fail_dedup=0, fail_audit=0):
        self.sim = SimBackend(corpus)
        self.fail_dedup = fail_dedup
        self.fail_audit = fail_audit

    def chat(self, request):
        p = request.prompt
        if "Point A:" in p and self.fail_dedup:
            self.fail_dedup -= 1
            raise ServerError("judge down")
        if "Knowledge Point:" in p and self.fail_audit:
            self.fail_audit -= 1
            raise ServerError("audit down")
        return self.sim.chat(request)

    def embed(self, texts, model_id):
        return self.sim.embed(texts, model_id)


def zone_pair(corpus):
    for leaf in range(corpus.leaf_count):
        fs = corpus.facts_in_leaf(leaf)
        for a in fs:
            for b in fs:
                s = float(sim_embed(a.variants[0], corpus) @ sim_embed(b.variants[0], corpus))
                if a is not b and 0.70 < s <= 0.92:
                    return a.variants[0], b.variants[0]
    raise AssertionError("corpus has no zone pair")


def test_judge_outage_defers_then_recovers(corpus):
    a, b = zone_pair(corpus)
    backend = FailingJudge(corpus, fail_dedup=3)  # one candidate's three attempts
    g = Gateway(backends={"sim:": backend}, sleep=lambda s: None)
    state = RunState()
    atoms, decisions = KnowledgeProcessor(g).deduplicate(mint_pool([a, b]), state, turn=1)
    assert [d.outcome for d in decisions] == ["accepted_novel", "kept_after_judge"]


def test_judge_outage_that_persists_fails(corpus):
    a, b = zone_pair(corpus)
    g = Gateway(backends={"sim:": FailingJudge(corpus, fail_dedup=99)}, sleep=lambda s: None)
    with pytest.raises(FailedAdjudicationError):
        KnowledgeProcessor(g).deduplicate(mint_pool([a, b]), RunState(), turn=1)


def test_audit_outage_leaves_atom_unique(corpus):
    g = Gateway(backends={"sim:": FailingJudge(corpus, fail_audit=3)}, sleep=lambda s: None, concurrency=1)
    state = RunState()
    res = KnowledgeProcessor(g).process_turn_pool(
        mint_pool([corpus.facts[0].variants[0], corpus.facts[1].variants[0]]), state, "T", turn=1
    )
    assert sorted(a.status for a in res.atoms) == ["unique", "valid"]
    assert state.incomplete_audit


def test_junk_judge_reply_is_flagged_no(corpus):
    class Junk:
        def chat(self, request):
            return ChatResponse("I am not sure", 1, 1)

        def embed(self, texts, model_id):
            return SimBackend(corpus).embed(texts, model_id)

    g = Gateway(backends={"sim:": Junk()})
    state = RunState()
    res = KnowledgeProcessor(g).process_turn_pool(mint_pool([corpus.facts[0].variants[0]]), state, "T", turn=1)
    assert res.atoms[0].status == "rejected_audit"
    audit = [d for d in state.decisions if d["type"] == "audit"][0]
    assert audit["flagged"]
    assert g.cost_ledger()[0] == 4  # asked twice


def test_replay_at_published_scale():
    # 3072 facts: 2454 stay true, 602 come back garbled, 123 are paraphrase repeats
    corpus = generate_corpus(seed=7, branching=4, depth=3, facts_per_leaf=48, zipf_s=1.1, paraphrases_per_fact=2)
    rng = np.random.default_rng(0)
    order = rng.permutation(corpus.total_fact_count)[:3056]
    texts = []
    for k, fid in enumerate(order):
        f = corpus.facts[int(fid)]
        texts.append(f.variants[0] if k < 2454 else f"{f.variants[0]} [garbled {k}]")
    repeats = rng.choice(2454, size=123, replace=False)
    stream = texts + [corpus.facts[int(order[i])].variants[1] for i in repeats]
    rng.shuffle(stream)
    assert len(stream) == 3179
    g = Gateway(backends={"sim:": SimBackend(corpus)})
    proc = KnowledgeProcessor(g)
    state = RunState()
    raw = unique = valid = 0
    for t, start in enumerate(range(0, len(stream), 250), 1):
        res = proc.process_turn_pool(mint_pool(stream[start : start + 250], turn=t), state, "T", turn=t)
        raw += len(res.atoms)
        unique += res.novel_count
        valid += sum(a.status == "valid" for a in res.novel)
    assert (raw, unique, valid) == (3179, 3056, 2454)


# -- union --------------------------------------------------------------------

def valid_set(processor, texts, run_id, model):
    state = RunState()
    res = processor.process_turn_pool(mint_pool(texts, run_id=run_id, model_id=model), state, "T", turn=1)
    return [a for a in res.atoms if a.status == "valid"]


def test_union_of_identical_sets(processor, corpus):
    texts = [f.variants[0] for f in corpus.facts[:30]]
    a = valid_set(processor, texts, "ra", "sim:a")
    b = valid_set(processor, texts, "rb", "sim:b")
    u = build_union({"sim:a": a, "sim:b": b}, processor)
    assert len(u) == 30
    assert u.covered_by("sim:a") == u.covered_by("sim:b") == 30


def test_union_of_disjoint_sets(processor, corpus):
    a = valid_set(processor, [f.variants[0] for f in corpus.facts_in_leaf(0)], "ra", "sim:a")
    b = valid_set(processor, [f.variants[0] for f in corpus.facts_in_leaf(5)], "rb", "sim:b")
    u = build_union({"sim:a": a, "sim:b": b}, processor)
    assert len(u) == len(a) + len(b)


def test_union_needs_two_sets(processor):
    with pytest.raises(ValueError):
        build_union({"sim:a": []}, processor)


def test_union_is_order_independent(processor, corpus):
    a = valid_set(processor, [f.variants[0] for f in corpus.facts[:40]], "ra", "sim:a")
    b = valid_set(processor, [f.variants[1] for f in corpus.facts[20:60]], "rb", "sim:b")
    u1 = build_union({"sim:a": a, "sim:b": b}, processor)
    u2 = build_union({"sim:b": b[::-1], "sim:a": a[::-1]}, processor)
    assert [x.atom_id for x in u1.atoms] == [x.atom_id for x in u2.atoms]
    assert u1.membership == u2.membership
    assert len(u1) == 60
