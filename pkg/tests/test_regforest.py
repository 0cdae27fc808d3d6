import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.regforest import (ClusterIndex, ForestParams, RegressionForest,
                                cluster_folds, crossfit_predict, default_mtry,
                                draw_subsample, fit_regression_forest, tree_streams)


@pytest.mark.parametrize("k, m", [(72, 28), (4, 4), (400, 40), (1, 1), (20, 20), (25, 25)])
def test_default_mtry(k, m):
    assert default_mtry(k) == m


def test_default_mtry_rejects_zero():
    with pytest.raises(ValueError):
        default_mtry(0)


def test_params_defaults():
    p = ForestParams()
    assert (p.num_trees, p.subsample_fraction, p.min_leaf, p.honesty) == (2000, 0.5, 5, True)
    assert p.resolve_mtry(72) == 28
    with pytest.raises(ValueError):
        ForestParams(mtry=5).resolve_mtry(3)
    with pytest.raises(ValueError):
        ForestParams(subsample_fraction=0.0)


def _data(n=400, k=3, seed=0, clusters_of=1):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, k))
    y = X[:, 0] * 2 + rng.normal(size=n) * 0.1
    return X, y, np.arange(n) // clusters_of


# -- trivial fits ---------------------------------------------------------------

def test_constant_target():
    X, _, cl = _data()
    f = fit_regression_forest(X, np.full(len(X), 4.25), cl, ForestParams(num_trees=20))
    assert np.all(f.predict(X) == 4.25)


def test_constant_features_give_root_only_trees():
    rng = np.random.default_rng(1)
    X = np.ones((100, 2))
    y = rng.normal(size=100)
    params = ForestParams(num_trees=10, subsample_fraction=1.0, honesty=False)
    f = fit_regression_forest(X, y, np.arange(100), params)
    assert all(t.n_leaves == 1 for t in f.trees)
    assert np.allclose(f.predict(X[:3]), y.mean(), rtol=0, atol=1e-12)


def test_single_cluster_is_bagged_cart():
    X, y, _ = _data(n=120)
    params = ForestParams(num_trees=8, honesty=False, mtry=3)
    f = fit_regression_forest(X, y, np.zeros(120, dtype=int), params)
    for t in f.trees:
        assert np.array_equal(t.subsample_indices, np.arange(120))
    # with all features tried at every split the trees coincide
    first = f.trees[0]
    for t in f.trees[1:]:
        assert np.array_equal(t.feature, first.feature)
        assert np.array_equal(t.threshold, first.threshold)
    assert np.allclose(f.predict(X), first.predict(X), rtol=1e-13, atol=1e-13)


def test_grid_target_below_spacing():
    grid = np.arange(0.0, 100.0)
    X = grid[:, None]
    params = ForestParams(num_trees=5, subsample_fraction=1.0, honesty=False,
                          min_leaf=1, imbalance_alpha=0.0)
    f = fit_regression_forest(X, grid, np.arange(100), params)
    query = np.linspace(0, 99, 1000)
    # thresholds sit at midpoints and ties go left
    nearest_cell = np.ceil(query - 0.5)
    pred = f.predict(query[:, None])
    assert np.max(np.abs(pred - query)) < 1.0
    assert np.array_equal(pred, nearest_cell)
    assert np.array_equal(f.predict(X), grid)


# -- structure ------------------------------------------------------------------------

def test_honest_halves_are_cluster_disjoint():
    X, y, cl = _data(n=600, clusters_of=3)
    f = fit_regression_forest(X, y, cl, ForestParams(num_trees=30))
    for t in f.trees:
        assert np.intersect1d(t.structure_rows, t.estimation_rows).size == 0
        assert np.intersect1d(cl[t.structure_rows], cl[t.estimation_rows]).size == 0
        assert set(np.unique(cl[t.subsample_indices])) == set(t.inbag_clusters.tolist())
        assert len(t.inbag_clusters) == 100


def test_leaf_sizes_respect_minimum():
    X, y, cl = _data(n=800)
    f = fit_regression_forest(X, y, cl, ForestParams(num_trees=20, min_leaf=7))
    for t in f.trees:
        leaves = t.feature == -1
        assert np.all(t.count[leaves] >= 7)
        srows_leaf = t.apply(X[t.structure_rows])
        assert np.bincount(srows_leaf, minlength=len(t.feature))[leaves].min() >= 7


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 60), st.integers(0, 1000), st.floats(0.1, 1.0))
def test_subsample_draw_properties(n_clusters, seed, frac):
    cl = np.repeat(np.arange(n_clusters), 3)
    index = ClusterIndex(cl)
    params = ForestParams(subsample_fraction=frac)
    inbag, s, e = draw_subsample(np.random.default_rng(seed), index, params)
    assert len(inbag) == max(1, int(np.floor(frac * n_clusters)))
    assert np.intersect1d(s, e).size == 0
    assert len(s) > 0 and len(e) > 0
    assert set(np.union1d(s, e).tolist()) == set(index.rows_of(inbag).tolist())


def test_seed_determinism_across_threads():
    X, y, cl = _data(n=500, k=5)
    a = fit_regression_forest(X, y, cl, ForestParams(num_trees=24, seed=3, n_threads=1))
    b = fit_regression_forest(X, y, cl, ForestParams(num_trees=24, seed=3, n_threads=4))
    assert a.to_dict()["trees"] == b.to_dict()["trees"]
    assert np.array_equal(a.predict(X), b.predict(X))
    c = fit_regression_forest(X, y, cl, ForestParams(num_trees=24, seed=4))
    assert a.to_dict()["trees"] != c.to_dict()["trees"]


def test_tree_streams_are_stable():
    s1 = [k for _, k in tree_streams(5, 4)]
    s2 = [k for _, k in tree_streams(5, 6)][:4]
    assert s1 == s2


# -- prediction -------------------------------------------------------------------------

def test_oob_uses_only_out_of_bag_trees():
    X, y, cl = _data(n=200, clusters_of=2)
    f = fit_regression_forest(X, y, cl, ForestParams(num_trees=15))
    oob = f.predict_oob(X, cl)
    for i in range(0, 200, 17):
        use = [t for t in f.trees if cl[i] not in set(t.inbag_clusters.tolist())]
        expect = np.mean([t.predict(X[i:i + 1])[0] for t in use])
        assert oob[i] == pytest.approx(expect, rel=1e-12)


def test_prediction_is_mean_of_trees():
    X, y, cl = _data(n=200)
    f = fit_regression_forest(X, y, cl, ForestParams(num_trees=9))
    manual = np.mean([t.predict(X) for t in f.trees], axis=0)
    assert np.allclose(f.predict(X), manual, rtol=1e-12, atol=1e-12)


def test_json_round_trip():
    X, y, cl = _data(n=200)
    f = fit_regression_forest(X, y, cl, ForestParams(num_trees=6))
    back = RegressionForest.from_json(f.to_json())
    assert np.array_equal(back.predict(X), f.predict(X))
    assert np.array_equal(back.predict_oob(X, cl), f.predict_oob(X, cl), equal_nan=True)
    assert back.params == f.params


def test_wrong_width_rejected():
    X, y, cl = _data(n=100)
    f = fit_regression_forest(X, y, cl, ForestParams(num_trees=2))
    with pytest.raises(ValueError):
        f.predict(X[:, :2])


# -- cross-fitting -----------------------------------------------------------------------

def test_folds_keep_clusters_together():
    cl = np.repeat(np.arange(30), 4)
    folds = cluster_folds(cl, 2, seed=0)
    for c in range(30):
        assert len(set(folds[cl == c].tolist())) == 1
    assert abs(np.sum(folds == 0) - np.sum(folds == 1)) <= 4


def test_too_few_clusters_for_folds():
    with pytest.raises(ValueError):
        cluster_folds(np.zeros(10), 2, seed=0)


def test_crossfit_constant_target():
    X, _, cl = _data(n=200)
    out = crossfit_predict(X, np.full(200, -3.5), cl, ForestParams(num_trees=5))
    assert np.all(out == -3.5)


def test_crossfit_prediction_ignores_own_outcome():
    X, y, cl = _data(n=300, clusters_of=3)
    params = ForestParams(num_trees=10, seed=2)
    base = crossfit_predict(X, y, cl, params)
    folds = cluster_folds(cl, 2, params.seed)
    for i in (0, 57, 211):
        y2 = y.copy()
        y2[i] += 1e6
        moved = crossfit_predict(X, y2, cl, params)
        same_fold = folds == folds[i]
        assert np.array_equal(moved[same_fold], base[same_fold])


def test_crossfit_fit_mask_excludes_rows():
    X, y, cl = _data(n=300)
    mask = X[:, 1] > 0
    params = ForestParams(num_trees=6)
    base = crossfit_predict(X, y, cl, params, fit_mask=mask)
    y2 = y.copy()
    y2[~mask] = 1e9
    assert np.array_equal(crossfit_predict(X, y2, cl, params, fit_mask=mask), base)


def test_crossfit_propensity_accuracy():
    rng = np.random.default_rng(0)
    n = 4000
    X = rng.normal(size=(n, 4))
    p = 0.3 + 0.4 * (X[:, 0] > 0)
    d = (rng.random(n) < p).astype(float)
    cl = np.arange(n) // 4
    pred = crossfit_predict(X, d, cl, ForestParams(num_trees=200, seed=1))
    assert np.mean(np.abs(pred - p)) < 0.05
