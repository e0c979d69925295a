import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridkv.budget import (
    BudgetConfig,
    BudgetWarning,
    allocate_dynamic,
    allocate_static,
    build_plan,
    max_share_coefficient,
    next_power_of_two,
    split_by_type,
)
from hybridkv.classify import HeadClass, HeadKind, SparsityScores
from hybridkv.errors import BudgetError


def test_split_uniform_r1():
    assert split_by_type(100, 5, 5, 1.0) == (50, 50, 10.0)


def test_split_r075():
    assert split_by_type(100, 5, 5, 0.75)[:2] == (62, 38)


def test_split_at_constraint_boundary():
    assert max_share_coefficient(100, 5, 5) == 2.0
    assert split_by_type(100, 5, 5, 2.0)[:2] == (0, 100)


def test_split_errors():
    with pytest.raises(BudgetError):
        split_by_type(100, 5, 5, 2.01)
    with pytest.raises(BudgetError):
        split_by_type(9, 5, 5, 0.5)
    with pytest.raises(BudgetError):
        split_by_type(10, 0, 0, 0.5)


def test_split_no_dynamic_heads():
    assert split_by_type(100, 4, 0, 0.75) == (100, 0, 25.0)


def test_allocate_static_hand_values():
    got = allocate_static(60, {"a": 0.5, "b": 0.3, "c": 0.2}, 0.5)
    assert got == {"a": 25, "b": 19, "c": 16}


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
def test_allocate_static_equal_scores(alpha):
    got = allocate_static(70, {i: 0.7 for i in range(4)}, alpha)
    assert set(got.values()) == {math.ceil(70 / 4)}


def test_allocate_static_alpha_near_one_is_near_uniform():
    got = allocate_static(60, {"a": 0.5, "b": 0.3, "c": 0.2}, 0.99)
    # 0.99*20 + 0.01*60*s -> 20.1, 19.98, 19.92
    assert got == {"a": 21, "b": 20, "c": 20}
    assert all(abs(b - 20) <= 1 for b in got.values())


def test_allocate_static_errors():
    with pytest.raises(BudgetError):
        allocate_static(10, {}, 0.5)
    assert allocate_static(0, {}, 0.5) == {}
    with pytest.raises(BudgetError):
        allocate_static(10, {"a": 0.0}, 0.5)


def test_allocate_static_floor_of_one():
    assert allocate_static(0, {"a": 0.4, "b": 0.6}, 0.5) == {"a": 1, "b": 1}


def test_allocate_dynamic_examples():
    assert allocate_dynamic(38, 5, 8) == 1
    assert allocate_dynamic(37, 1, 8) == 8
    assert allocate_dynamic(8, 1, 8) == 1


def test_allocate_dynamic_zero_budget_warns():
    with pytest.warns(BudgetWarning):
        assert allocate_dynamic(0, 3, 8) == 1


@pytest.mark.parametrize("n,want", [(0, 1), (1, 1), (2, 2), (3, 4), (5, 8), (8, 8), (9, 16), (1000, 1024)])
def test_next_power_of_two(n, want):
    assert next_power_of_two(n) == want


def _classes(static, dynamic):
    kinds = [HeadKind.STATIC] * static + [HeadKind.DYNAMIC] * dynamic
    return HeadClass(labels=(tuple(kinds),), threshold=0.9, cutoff=0.9)


def test_build_plan_mixed_example():
    classes = _classes(3, 2)
    scores = SparsityScores(np.array([[0.5, 0.3, 0.2, 0.1, 0.1]]), k_used=1)
    plan = build_plan(BudgetConfig(100, 0.75, 0.5, 8), classes, scores)
    assert plan.mean_budget == 20
    assert (plan.dynamic_budget, plan.static_budget) == (30, 70)
    assert [plan.per_head_static[(0, h)] for h in range(3)] == [30, 23, 19]
    assert plan.static_budget + plan.dynamic_budget == 100


def test_build_plan_mixed_chunks():
    classes = _classes(3, 2)
    scores = SparsityScores(np.array([[0.5, 0.3, 0.2, 0.1, 0.1]]), k_used=1)
    plan = build_plan(BudgetConfig(100, 0.75, 0.5, 8), classes, scores)
    # 15 tokens per dynamic head -> ceil(15/8) = 2 chunks, already a power of two
    assert plan.per_head_dynamic_chunks == 2


def test_build_plan_all_static():
    classes = _classes(4, 0)
    scores = SparsityScores(np.array([[0.4, 0.3, 0.2, 0.1]]), k_used=1)
    plan = build_plan(BudgetConfig(100, 0.75, 0.5), classes, scores)
    assert plan.dynamic_budget == 0 and plan.static_budget == 100
    assert plan.per_head_static == allocate_static(100, {(0, h): s for h, s in enumerate([0.4, 0.3, 0.2, 0.1])}, 0.5)


def test_build_plan_all_dynamic_takes_whole_budget():
    classes = _classes(0, 4)
    scores = SparsityScores(np.full((1, 4), 0.3), k_used=1)
    plan = build_plan(BudgetConfig(100, 0.75, 0.5), classes, scores)
    assert plan.static_budget == 0 and plan.dynamic_budget == 100
    assert plan.per_head_dynamic_chunks == 4  # 25 tokens -> 4 chunks


def test_plan_json_has_nominal_and_actual():
    classes = _classes(3, 2)
    scores = SparsityScores(np.array([[0.5, 0.3, 0.2, 0.1, 0.1]]), k_used=1)
    d = build_plan(BudgetConfig(100, 0.75, 0.5, 8), classes, scores).to_dict()
    assert d["static"]["nominal"] == 70 and d["static"]["actual"] == 72 and d["static"]["slack"] == 2
    assert d["dynamic"]["actual"] == 32


@settings(max_examples=300, deadline=None)
@given(
    st.integers(1, 40),
    st.integers(0, 40),
    st.integers(1, 5000),
    st.floats(0.01, 1.0),
    st.floats(0.01, 0.99),
    st.data(),
)
def test_plan_properties(n_stat, n_dyna, per_head, r_frac, alpha, data):
    n = n_stat + n_dyna
    total = per_head * n
    r = r_frac * max_share_coefficient(total, n_stat, n_dyna) if n_dyna else 0.75
    scores = data.draw(st.lists(st.floats(0.01, 1.0), min_size=n_stat, max_size=n_stat))
    b_stat, b_dyna, _ = split_by_type(total, n_stat, n_dyna, r)
    assert b_stat + b_dyna == total and b_stat >= 0
    alloc = allocate_static(b_stat, dict(enumerate(scores)), alpha)
    assert 0 <= sum(alloc.values()) - b_stat <= n_stat
    if n_dyna:
        chunks = allocate_dynamic(b_dyna, n_dyna, 8) if b_dyna else 1
        assert chunks & (chunks - 1) == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 30), st.integers(1, 30), st.integers(1, 500), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_r_monotone(n_stat, n_dyna, per_head, r1, r2):
    total = per_head * (n_stat + n_dyna)
    bound = max_share_coefficient(total, n_stat, n_dyna)
    lo, hi = sorted((r1 * bound, r2 * bound))
    assert split_by_type(total, n_stat, n_dyna, lo)[1] <= split_by_type(total, n_stat, n_dyna, hi)[1]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 30), st.integers(1, 500))
def test_r_one_symmetry(n, per_head):
    total = per_head * 2 * n + (per_head % 2)
    b_stat, b_dyna, _ = split_by_type(total, n, n, 1.0)
    assert abs(b_stat - b_dyna) <= 1


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0.05, 1.0), min_size=2, max_size=10),
    st.integers(10, 2000),
    st.floats(0.01, 0.99),
    st.floats(0.0, 1.0),
)
def test_pairwise_transfer_monotone(norm_scores, b_stat, alpha, frac):
    s = np.array(norm_scores) / sum(norm_scores)
    moved = s.copy()
    delta = frac * moved[1]
    moved[0] += delta
    moved[1] -= delta
    if moved[1] <= 0:
        return
    before = allocate_static(b_stat, dict(enumerate(s)), alpha)
    after = allocate_static(b_stat, dict(enumerate(moved)), alpha)
    assert after[0] >= before[0]


def test_config_validation():
    with pytest.raises(BudgetError):
        BudgetConfig(100, allocation_ratio=1.0)
    with pytest.raises(BudgetError):
        BudgetConfig(100, share_coefficient=0.0)
    with pytest.raises(BudgetError):
        BudgetConfig(100, chunk_size=0)
