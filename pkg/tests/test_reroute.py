import numpy as np
import pytest
from hypothesis import given, strategies as st

from capmoe.capacity import UNBOUNDED, CapacityPolicy, drop_overflow
from capmoe.gating import expert_load, softmax_rows, topk_select
from capmoe.reroute import RerouteConfig, reroute, reroute_sweep

from conftest import naive_reroute


def test_running_example_two_rounds(running_scores):
    res = reroute(running_scores, RerouteConfig(k=1, capacity=2, rounds=2))
    assert res.final.keys() == {(0, 0), (1, 0), (2, 1), (3, 2), (4, 1), (5, 2)}
    assert expert_load(res.final, 3).tolist() == [2, 2, 2]
    assert [r.dropped_count for r in res.per_round] == [2, 0]
    assert res.per_round[0].loads.tolist() == [2, 1, 1]
    # Rerouted mappings keep their original softmax scores.
    assert dict(((tok, e), sc) for tok, e, sc in res.final)[(2, 1)] == 0.2
    assert res.updated_scores[2, 0] == 0.0 and res.updated_scores[3, 0] == 0.0


def test_one_round_equals_score_drop(running_scores):
    res = reroute(running_scores, RerouteConfig(k=1, capacity=2, rounds=1))
    drop = drop_overflow(running_scores, topk_select(running_scores, 1), 2, CapacityPolicy(1.0, "score"))
    assert res.final == drop.retained
    assert np.array_equal(res.updated_scores, drop.masked_scores)


def test_unbounded_is_plain_topk(running_scores):
    for rounds in (1, 3):
        res = reroute(running_scores, RerouteConfig(k=1, capacity=UNBOUNDED, rounds=rounds))
        assert res.final == topk_select(running_scores, 1)
        assert all(r.dropped_count == 0 for r in res.per_round)
        assert len(res.per_round) == rounds


def test_sweep_running_example(running_scores):
    out = reroute_sweep(running_scores, 1, 2, 3)
    assert [s.retained for s in out] == [4, 6, 6]
    assert [s.rounds for s in out] == [1, 2, 3]


def test_sweep_balanced_trace_is_topk():
    s = softmax_rows(np.random.default_rng(0).standard_normal((64, 8)))
    base = topk_select(s, 2)
    for summary in reroute_sweep(s, 2, 64, 3):
        assert summary.final == base


def test_config_validation():
    with pytest.raises(ValueError):
        RerouteConfig(k=1, capacity=2, rounds=0)
    with pytest.raises(ValueError):
        reroute_sweep(np.ones((1, 1)), 1, 1, 0)


@st.composite
def cases(draw):
    t = draw(st.integers(1, 30))
    n = draw(st.integers(1, 6))
    k = draw(st.integers(1, n))
    rng = np.random.default_rng(draw(st.integers(0, 2**32)))
    skew = draw(st.floats(0, 4))
    # Coarse rounding creates plenty of score ties.
    logits = np.round(rng.standard_normal((t, n)) + skew * rng.standard_normal(n), 1)
    s = softmax_rows(logits)
    cap = draw(st.integers(0, t))
    rounds = draw(st.integers(1, 5))
    return s, k, cap, rounds


@given(cases())
def test_matches_naive_execution(case):
    s, k, cap, rounds = case
    res = reroute(s, RerouteConfig(k, cap, rounds))
    final, history, scores = naive_reroute(s, k, cap, rounds)
    assert res.final.keys() == final
    assert [(r.loads.tolist(), r.dropped_count) for r in res.per_round] == history
    assert np.array_equal(res.updated_scores, scores)


@given(cases())
def test_round_invariants(case):
    s, k, cap, rounds = case
    t, n = s.shape
    res = reroute(s, RerouteConfig(k, cap, rounds))
    assert len(res.per_round) == rounds
    assert all(np.all(r.loads <= cap) for r in res.per_round)
    assert np.all(expert_load(res.final, n) <= cap)
    counts = res.final.per_token_count(t)
    assert np.all(counts <= k)
    # Tokens that never lost a mapping keep all k.
    lost = {tok for tok, _ in map(tuple, np.argwhere((res.updated_scores == 0) & (s > 0)))}
    for tok in set(range(t)) - lost:
        assert counts[tok] == min(k, n)


@given(cases())
def test_masking_is_monotone_and_prefix_consistent(case):
    s, k, cap, rounds = case
    sweep = reroute_sweep(s, k, cap, rounds)
    zeroed_prev = set()
    for r, summary in enumerate(sweep, start=1):
        direct = reroute(s, RerouteConfig(k, cap, r))
        assert direct.final == summary.final
        assert [x.dropped_count for x in direct.per_round] == [x.dropped_count for x in summary.per_round]
        zeroed = {tuple(ix) for ix in np.argwhere(direct.updated_scores == 0)}
        assert zeroed_prev <= zeroed
        zeroed_prev = zeroed
        if r < rounds:
            assert [x.dropped_count for x in sweep[r].per_round[:r]] == [x.dropped_count for x in summary.per_round]


@given(cases())
def test_fixed_point_after_zero_drop(case):
    s, k, cap, rounds = case
    sweep = reroute_sweep(s, k, cap, rounds)
    for r, summary in enumerate(sweep):
        if summary.per_round[-1].dropped_count == 0:
            for later in sweep[r:]:
                assert later.final == summary.final


@given(cases())
def test_retention_never_worse_than_one_round(case):
    s, k, cap, rounds = case
    sweep = reroute_sweep(s, k, cap, rounds)
    retained = [x.retained for x in sweep]
    assert retained == sorted(retained)


@given(cases())
def test_round_one_is_score_drop(case):
    s, k, cap, _ = case
    res = reroute(s, RerouteConfig(k, cap, 1))
    drop = drop_overflow(s, topk_select(s, k), cap, CapacityPolicy(1.0, "score"))
    assert res.final == drop.retained
