import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.dr_scores import DoublyRobustScores, estimate_ate
from artifact.gate import (GroupScheme, cross_scheme, estimate_gates, gate_export,
                           quartile_groups, scheme_from_labels)
from oracles import cluster_sandwich


def _scores(g, clusters=None):
    g = np.asarray(g, dtype=float)
    return DoublyRobustScores(g, np.arange(len(g)) if clusters is None else clusters)


# -- quartiles ------------------------------------------------------------------

def test_quartiles_of_one_to_eight():
    s = quartile_groups(np.arange(1, 9))
    assert s.sizes().tolist() == [2, 2, 2, 2]
    assert s.labels == ("Q1", "Q2", "Q3", "Q4")


def test_zero_block_goes_low():
    v = np.concatenate([np.zeros(50), np.arange(1, 51)])
    s = quartile_groups(v)
    zero_groups = set(s.assignment[v == 0].tolist())
    assert all(np.all(v[s.assignment == g] == 0) for g in zero_groups)
    assert s.assignment[v == 0].max() < s.assignment[v > 0].min()


def test_constant_values_rejected():
    with pytest.raises(ValueError, match="degenerate grouping"):
        quartile_groups(np.full(10, 3.0))


@settings(max_examples=80)
@given(st.lists(st.integers(0, 6), min_size=8, max_size=80))
def test_quartile_sizes_bounded_by_tie_blocks(values):
    v = np.asarray(values, dtype=float)
    if v.min() == v.max():
        return
    s = quartile_groups(v)
    # groups are ordered intervals of the sorted values
    for a in range(s.n_groups - 1):
        assert v[s.assignment == a].max() < v[s.assignment == a + 1].min()
    largest_tie = np.max(np.unique(v, return_counts=True)[1])
    sizes = s.sizes()
    # a cut can only overshoot its quarter by the tie block sitting on it
    assert sizes.max() <= len(v) / 4 + largest_tie + 1
    assert sizes.sum() == len(v)


def test_quartile_sizes_without_ties():
    rng = np.random.default_rng(0)
    for n in range(8, 60):
        s = quartile_groups(rng.normal(size=n))
        assert s.sizes().max() - s.sizes().min() <= 1


# -- schemes ----------------------------------------------------------------------

def test_scheme_labels_follow_order_and_drop_absent():
    s = scheme_from_labels("age", ["b", "a", "b"], order=["a", "z", "b"])
    assert s.labels == ("a", "b")
    assert s.assignment.tolist() == [1, 0, 1]


def test_scheme_rejects_unlisted_values():
    with pytest.raises(ValueError):
        scheme_from_labels("age", ["a", "q"], order=["a"])


def test_group_scheme_rejects_empty_group():
    with pytest.raises(ValueError, match="empty"):
        GroupScheme("g", np.array([0, 0]), ("a", "b"))


def test_cross_scheme_cells():
    a = scheme_from_labels("a", ["x", "x", "y", "y"])
    b = scheme_from_labels("b", ["u", "v", "u", "u"])
    c = cross_scheme(a, b)
    assert c.labels == ("x x u", "x x v", "y x u")
    assert c.sizes().tolist() == [1, 1, 2]


# -- estimates -------------------------------------------------------------------

def test_group_means_are_coefficients():
    g = np.array([2.0, 4.0, 4.0, 6.0])
    res = estimate_gates(_scores(g), GroupScheme("g", np.array([0, 0, 1, 1]), ("a", "b")))
    assert res.coef.tolist() == [3.0, 5.0]


def test_single_group_reproduces_ate():
    rng = np.random.default_rng(1)
    g = rng.normal(size=200)
    cl = rng.integers(0, 30, size=200)
    res = estimate_gates(_scores(g, cl), GroupScheme("all", np.zeros(200, dtype=np.int64),
                                                     ("all",)))
    ate = estimate_ate(_scores(g, cl))
    assert res.coef[0] == ate.theta and res.std_error[0] == ate.std_error


def test_matches_indicator_regression_sandwich():
    rng = np.random.default_rng(2)
    n = 500
    groups = rng.integers(0, 4, size=n)
    cl = rng.integers(0, 80, size=n)
    g = rng.normal(size=n) + groups
    scheme = GroupScheme("g", groups, ("a", "b", "c", "d"))
    res = estimate_gates(_scores(g, cl), scheme)
    design = (groups[:, None] == np.arange(4)[None, :]).astype(float)
    beta, se = cluster_sandwich(design, g, cl)
    assert np.allclose(res.coef, beta, rtol=1e-12, atol=0)
    assert np.allclose(res.std_error, se, rtol=1e-10, atol=0)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(2, 5))
def test_size_weighted_coefficients_equal_ate(seed, k):
    rng = np.random.default_rng(seed)
    n = 120
    g = rng.normal(size=n) * 10
    groups = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
    cl = np.arange(n)
    res = estimate_gates(_scores(g, cl), GroupScheme("g", groups,
                                                     tuple(str(j) for j in range(k))))
    ate = estimate_ate(_scores(g, cl)).theta
    weighted = np.sum(res.coef * res.sizes) / n
    assert weighted == pytest.approx(ate, rel=1e-10, abs=1e-12)


def test_group_with_single_cluster_named_in_error():
    g = np.arange(4.0)
    with pytest.raises(ValueError, match="'lonely'"):
        estimate_gates(_scores(g, np.array([0, 1, 2, 2])),
                       GroupScheme("g", np.array([0, 0, 1, 1]), ("busy", "lonely")))


def test_confidence_interval_and_export():
    from artifact.gate import GateResult
    res = GateResult(("a", "b"), np.array([0.0, 1.0]), np.array([1.0, 0.5]), np.array([3, 4]))
    assert res.ci_low[0] == -1.96 and res.ci_high[0] == 1.96
    lines = gate_export(res).strip().splitlines()
    assert lines[0] == "group_label,coef,se,ci_lo,ci_hi"
    assert len(lines) - 1 == 2
    assert [ln.split(",")[0] for ln in lines[1:]] == ["a", "b"]
