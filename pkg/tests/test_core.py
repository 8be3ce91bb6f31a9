import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kbprobe.core import (
    EmptyTextError,
    IllegalTransitionError,
    KnowledgeAtom,
    Origin,
    SaturationConfig,
    TurnRecord,
    check_saturation,
    efficiency,
    growth_rate,
    make_atom_id,
    make_turn,
    mint_atom,
    normalize_text,
    transition,
)

ORIGIN = Origin("sequential", 1)


def atom(text="A fact.", **kw):
    return mint_atom(text, ORIGIN, run_id="r", ordinal=0, model_id="sim:demo", topic_id="T", **kw)


def test_mint_strips_bullet():
    a = atom("- Dropout randomly zeroes activations during training.")
    assert a.text == "Dropout randomly zeroes activations during training."
    assert a.status == "raw"
    assert a.category == "unclassified"


def test_mint_collapses_whitespace():
    assert atom("•  Attention   scales as  O(n^2).").text == "Attention scales as O(n^2)."


@pytest.mark.parametrize("text", ["   ", "-", " - * ", "\n\t"])
def test_mint_rejects_empty(text):
    with pytest.raises(EmptyTextError):
        atom(text)


def test_atom_ids_are_deterministic_and_distinct():
    assert make_atom_id("r", 1, 0) == make_atom_id("r", 1, 0)
    ids = {make_atom_id(r, t, o) for r in "ab" for t in range(3) for o in range(5)}
    assert len(ids) == 30


@given(st.text())
def test_normalize_is_idempotent(text):
    once = normalize_text(text)
    assert normalize_text(once) == once
    assert "  " not in once


def test_legal_transitions():
    a = atom()
    u = transition(a, "unique")
    assert transition(u, "valid").status == "valid"
    assert transition(u, "rejected_audit").status == "rejected_audit"
    d = transition(a, "rejected_duplicate", merged_into="a123")
    assert d.merged_into == "a123"


def test_reverse_edge_names_both_statuses():
    v = transition(transition(atom(), "unique"), "valid")
    with pytest.raises(IllegalTransitionError) as err:
        transition(v, "raw")
    assert "valid" in str(err.value) and "raw" in str(err.value)


@pytest.mark.parametrize(
    "old,new", [("raw", "valid"), ("unique", "rejected_duplicate"), ("rejected_audit", "valid")]
)
def test_illegal_edges(old, new):
    a = atom()
    path = {"raw": [], "unique": ["unique"], "rejected_audit": ["unique", "rejected_audit"]}[old]
    for s in path:
        a = transition(a, s)
    with pytest.raises(IllegalTransitionError):
        transition(a, new, merged_into="x" if new == "rejected_duplicate" else None)


def test_merged_into_iff_duplicate():
    with pytest.raises(ValueError):
        transition(atom(), "rejected_duplicate")
    with pytest.raises(ValueError):
        KnowledgeAtom("a1", "t", "m", "T", ORIGIN, status="unique", merged_into="a0")


def test_embedding_must_be_unit():
    with pytest.raises(ValueError):
        atom().with_embedding(np.array([3.0, 4.0]))
    assert atom().with_embedding(np.array([0.6, 0.8])).embedding is not None


def test_origin_round_trip():
    o = Origin("taxonomy", 3, leaf=("A", "B"), profile=None)
    assert Origin.from_dict(o.to_dict()) == o


def test_saturation_config_validation():
    with pytest.raises(ValueError):
        SaturationConfig(min_novel=0)
    with pytest.raises(ValueError):
        SaturationConfig(max_turns=0)
    assert SaturationConfig() == SaturationConfig(0.01, 0.10, 3, 15)


def test_growth_undefined_at_first_turn():
    rec = make_turn(1, 10, 10, 0)
    assert rec.growth_rate is None
    assert rec.efficiency == 1.0


def test_zero_raw_turn_is_low_novel():
    rec = make_turn(2, 0, 0, 40)
    assert rec.efficiency is None
    assert check_saturation(rec, [], SaturationConfig()) == "low_novel"


def test_turn_record_rejects_novel_above_raw():
    with pytest.raises(ValueError):
        TurnRecord(1, 2, 3, 3, None, 1.5)


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50)), min_size=1, max_size=20))
def test_turn_chain_recomputes_exactly(pairs):
    prior = 0
    for t, (a, b) in enumerate(pairs, 1):
        raw, novel = max(a, b), min(a, b)
        rec = make_turn(t, raw, novel, prior)
        assert rec.cumulative_unique == prior + novel
        assert rec.growth_rate == growth_rate(novel, prior)
        assert rec.efficiency == efficiency(novel, raw)
        if prior:
            assert abs(rec.growth_rate - novel / prior) < 1e-12
        prior = rec.cumulative_unique
