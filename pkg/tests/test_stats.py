from __future__ import annotations

import math
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from macomm.stats import (
    allocate,
    cochran_n0,
    cochran_sample_size,
    normal_quantile,
    normal_sf,
    plan,
    stratified_sample,
    two_sided_z,
)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-12, 1 - 1e-12))
def test_quantile_matches_scipy(p):
    assert normal_quantile(p) == pytest.approx(norm.ppf(p), rel=1e-9, abs=1e-9)


def test_tail_and_bounds():
    assert normal_sf(10.0) == pytest.approx(norm.sf(10.0), rel=1e-12)
    assert two_sided_z(0.95) == pytest.approx(1.959963984540054, abs=1e-12)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            normal_quantile(bad)


def _cochran_oracle(N, conf=0.95, e=0.05, p=0.5):
    z = norm.ppf(1 - (1 - conf) / 2)
    n0 = z * z * p * (1 - p) / (e * e)
    return min(math.ceil(n0 / (1 + (n0 - 1) / N)), N)


@pytest.mark.parametrize("N, n", [(100, 80), (800, 260), (8792, 369), (2290, 330), (15858, 376), (1, 1)])
def test_cochran_known_sizes(N, n):
    assert cochran_sample_size(N) == n


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10**6), st.sampled_from([0.9, 0.95, 0.99]), st.sampled_from([0.01, 0.03, 0.05, 0.1]))
def test_cochran_matches_oracle(N, conf, e):
    assert cochran_sample_size(N, conf, e) == _cochran_oracle(N, conf, e)


def test_cochran_validation_and_plan():
    assert cochran_n0() == pytest.approx(384.1459, abs=1e-4)
    with pytest.raises(ValueError):
        cochran_sample_size(0)
    with pytest.raises(ValueError):
        cochran_sample_size(10, margin=0)
    with pytest.raises(ValueError):
        cochran_sample_size(10, p=1.0)
    assert plan(500, full=True).n == 500
    assert plan(8792).n == 369


def test_allocate_gives_remainder_to_first_strata():
    assert allocate(["b", "a", "c"], 10) == {"a": 4, "b": 3, "c": 3}
    with pytest.raises(ValueError):
        allocate([], 3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=60), st.integers(0, 2**31))
def test_stratified_sample_respects_allocation(keys, seed):
    items = list(enumerate(keys))
    per = min(Counter(keys).values())
    out = stratified_sample(items, key=lambda x: x[1], per_stratum=per, seed=seed)
    assert Counter(k for _, k in out) == {k: per for k in set(keys)} if per else out == []
    assert len(set(out)) == len(out)
    assert out == stratified_sample(items, key=lambda x: x[1], per_stratum=per, seed=seed)


def test_stratified_sample_errors_and_order():
    items = ["a1", "a2", "a3", "b1", "b2"]
    out = stratified_sample(items, key=lambda s: s[0], total=4, seed=1)
    assert [s[0] for s in out] == ["a", "a", "b", "b"]
    with pytest.raises(ValueError):
        stratified_sample(items, key=lambda s: s[0], total=7)
    with pytest.raises(ValueError):
        stratified_sample(items, key=lambda s: s[0])
