from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsprover.core import (
    AttemptRecord,
    Deadline,
    Diagnostic,
    DraftFormat,
    FormalStatement,
    Outcome,
    PhaseConfig,
    SamplingParams,
    Severity,
    TokenUsage,
    new_attempt_id,
    parse_attempt_id,
)


class FakeClock:
    def __init__(self) -> None:
        self.t = 0.0

    def __call__(self) -> float:
        return self.t


def test_statement_requires_text():
    with pytest.raises(ValueError):
        FormalStatement("a", "", "   ")
    with pytest.raises(ValueError):
        FormalStatement("", "", "theorem x : True := by")


def test_statement_round_trip():
    s = FormalStatement("imo_1", "import Mathlib", "theorem t : 1 = 1 := by", "one is one", None, "minif2f")
    assert FormalStatement.from_dict(s.to_dict()) == s


def test_token_usage_rejects_inconsistent_breakdown():
    with pytest.raises(ValueError):
        TokenUsage(10, 0, 0, {"m": 9})
    with pytest.raises(ValueError):
        TokenUsage(10, 0, 0)
    with pytest.raises(ValueError):
        TokenUsage(-1, 1, 0, {"m": 0})


@given(st.lists(st.tuples(st.sampled_from("abc"), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50)), max_size=8))
def test_token_usage_addition_keeps_invariant(parts):
    total = TokenUsage()
    for model, a, t, p in parts:
        total = total + TokenUsage.for_model(model, answer=a, thinking=t, prover=p)
    assert sum(total.per_model.values()) == total.total
    assert total.total == sum(a + t + p for _, a, t, p in parts)
    assert TokenUsage.from_dict(total.to_dict()) == total


def test_diagnostic_severity():
    d = Diagnostic.from_dict({"line": 3, "column": 1, "severity": "warning", "message": "unused"})
    assert not d.is_error
    e = Diagnostic(2, 0, Severity.ERROR, "bad")
    assert e.is_error
    assert Diagnostic.from_dict(e.to_dict()) == e


def test_sampling_round_trip_and_override():
    s = SamplingParams(temperature=0.3, top_p=0.9, max_tokens=10, n=2, seed=7)
    assert SamplingParams.from_dict(s.to_dict()) == s
    assert s.with_(seed=None).seed is None


def test_phase_config_without_draft_model_has_no_draft_format():
    c = PhaseConfig(sketch_model="s")
    assert c.draft_format is DraftFormat.NONE


def test_config_hash_prefers_name_and_is_stable():
    a = PhaseConfig(sketch_model="s", draft_model="d")
    b = PhaseConfig(sketch_model="s", draft_model="d")
    assert a.config_hash == b.config_hash
    assert a.config_hash != PhaseConfig(sketch_model="s2", draft_model="d").config_hash
    assert PhaseConfig(sketch_model="s", name="cfgA").config_hash == "cfgA"
    assert PhaseConfig.from_dict(a.to_dict()) == a


@given(st.text(min_size=1).filter(lambda s: s.strip()), st.text(alphabet="abc123", min_size=1), st.integers(0, 1000))
def test_attempt_id_round_trip(stmt, cfg, k):
    assert parse_attempt_id(new_attempt_id(stmt, cfg, k)) == (stmt, cfg, k)


def test_attempt_id_rejects_negative_index():
    with pytest.raises(ValueError):
        new_attempt_id("s", "c", -1)


def _record(**kw):
    base = dict(attempt_id="s/c/0", statement_id="s", config=PhaseConfig(sketch_model="m", name="c"), outcome=Outcome.PARTIAL)
    base.update(kw)
    return AttemptRecord(**base)


def test_proved_record_needs_placeholder_free_proof():
    with pytest.raises(ValueError):
        _record(outcome=Outcome.PROVED, proof_text=None)
    with pytest.raises(ValueError):
        _record(outcome=Outcome.PROVED, proof_text="theorem t : True := by\n  sorry")
    assert _record(outcome=Outcome.PROVED, proof_text="theorem t : True := by\n  trivial").solved


def test_record_sample_bound_enforced():
    with pytest.raises(ValueError):
        _record(prover_samples=5, prover_sample_bound=4)


def test_record_round_trip_and_comparable_view():
    r = _record(wall_clock=3.5, started_at=100.0, cause="x", flags=("f",))
    assert AttemptRecord.from_dict(r.to_dict()) == r
    c = r.comparable_dict()
    assert "wall_clock" not in c and "started_at" not in c
    assert _record(wall_clock=9.0).comparable_dict() == _record().comparable_dict() | {"cause": "", "flags": []}


def test_deadline_by_clock_and_by_charge():
    clock = FakeClock()
    d = Deadline(10, clock=clock)
    assert not d.expired and d.remaining == 10
    clock.t = 4
    assert d.remaining == 6
    d.charge(7)
    assert d.used == 7 and d.remaining == 3
    clock.t = 10
    assert d.expired and d.remaining == 0
    with pytest.raises(ValueError):
        Deadline(0)


def test_child_deadline_propagates_both_ways():
    clock = FakeClock()
    parent = Deadline(10, clock=clock)
    child = parent.child(4)
    child.charge(3)
    assert parent.used == 3
    assert child.remaining == 1
    parent.charge(7)
    assert parent.expired and child.expired
    big = Deadline(5, clock=clock).child(100)
    assert big.remaining == 5
