"""Regression forests for nuisance estimation.

Trees are grown on cluster-level subsamples: a fraction of the clusters is
drawn without replacement and all rows of a drawn cluster enter the tree.
With honesty the drawn clusters are halved again, one half choosing splits and
the other filling the leaves.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Any

import numpy as np

from . import _tree

FORMAT_VERSION = 1


def default_mtry(k: int) -> int:
    """Number of candidate features per split, ``min(floor(sqrt(k) + 20), k)``."""
    if k < 1:
        raise ValueError("feature count must be at least 1")
    return min(int(math.floor(math.sqrt(k) + 20)), k)


@dataclass(frozen=True)
class ForestParams:
    num_trees: int = 2000
    subsample_fraction: float = 0.5
    mtry: int | None = None
    min_leaf: int = 5
    honesty: bool = True
    honesty_fraction: float = 0.5
    imbalance_alpha: float = 0.05
    seed: int = 0
    n_threads: int = 1

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be positive")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ValueError("honesty_fraction must lie in (0, 1)")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be positive")
        if not 0.0 <= self.imbalance_alpha < 0.5:
            raise ValueError("imbalance_alpha must lie in [0, 0.5)")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be positive")

    def resolve_mtry(self, k: int) -> int:
        if self.mtry is None:
            return default_mtry(k)
        if self.mtry > k:
            raise ValueError(f"mtry={self.mtry} exceeds feature count {k}")
        return self.mtry


class ClusterIndex:
    """Maps arbitrary cluster labels to codes and rows."""

    def __init__(self, clusters):
        labels, codes = np.unique(np.asarray(clusters), return_inverse=True)
        self.labels = labels
        self.codes = codes.astype(np.int64)
        order = np.argsort(self.codes, kind="stable")
        bounds = np.searchsorted(self.codes[order], np.arange(len(labels) + 1))
        self._rows = [order[bounds[c]:bounds[c + 1]] for c in range(len(labels))]

    @property
    def n_clusters(self) -> int:
        return len(self.labels)

    def rows_of(self, cluster_codes) -> np.ndarray:
        if len(cluster_codes) == 0:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate([self._rows[c] for c in cluster_codes]))


def draw_subsample(rng: np.random.Generator, index: ClusterIndex,
                   params: ForestParams):
    """Draw one tree's (in-bag clusters, structure rows, estimation rows)."""
    n_c = index.n_clusters
    n_draw = max(1, int(math.floor(params.subsample_fraction * n_c)))
    chosen = np.sort(rng.choice(n_c, size=n_draw, replace=False))
    if not params.honesty:
        rows = index.rows_of(chosen)
        return chosen, rows, rows
    if n_draw >= 2:
        perm = rng.permutation(chosen)
        n_struct = min(max(1, int(round(params.honesty_fraction * n_draw))), n_draw - 1)
        return (chosen, index.rows_of(np.sort(perm[:n_struct])),
                index.rows_of(np.sort(perm[n_struct:])))
    # a single drawn cluster can only be halved by rows
    rows = index.rows_of(chosen)
    perm = rng.permutation(rows)
    n_struct = min(max(1, int(round(params.honesty_fraction * len(rows)))),
                   len(rows) - 1)
    return chosen, np.sort(perm[:n_struct]), np.sort(perm[n_struct:])


def tree_streams(seed: int, num_trees: int):
    """Independent per-tree (Generator, kernel seed) pairs derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(num_trees)
    return [(np.random.default_rng(c), int(c.generate_state(1)[0] % (2**31 - 1)))
            for c in children]


def run_ordered(fn, items, n_threads: int):
    """Map ``fn`` over items, optionally on threads, keeping input order."""
    if n_threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class RegressionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    structure_rows: np.ndarray
    estimation_rows: np.ndarray
    inbag_clusters: np.ndarray

    @property
    def subsample_indices(self) -> np.ndarray:
        return np.union1d(self.structure_rows, self.estimation_rows)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == _tree.LEAF))

    def apply(self, X) -> np.ndarray:
        return _tree.apply_tree(self.feature, self.threshold, self.left,
                                self.right, np.ascontiguousarray(X, dtype=float))

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


_NODE_FIELDS = ("feature", "threshold", "left", "right", "value")
_NODE_DTYPES = {"feature": np.int32, "threshold": np.float64,
                "left": np.int32, "right": np.int32, "value": np.float64,
                "count": np.int32, "n_treated": np.int32, "n_control": np.int32,
                "structure_rows": np.int64, "estimation_rows": np.int64,
                "inbag_clusters": np.int64}


class ForestBase:
    """Shared prediction and bookkeeping for tree ensembles."""

    kind = "forest"

    def __init__(self, trees, params: ForestParams, n_features: int,
                 cluster_labels):
        self.trees = list(trees)
        self.params = params
        self.n_features = n_features
        self.cluster_labels = np.asarray(cluster_labels)
        self._stacked = None

    @property
    def rng_seed(self) -> int:
        return self.params.seed

    def _usable(self) -> np.ndarray:
        return np.ones(len(self.trees), dtype=np.bool_)

    def _stack(self):
        if self._stacked is None:
            sizes = np.array([len(t.feature) for t in self.trees], dtype=np.int64)
            offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
            cat = {name: np.concatenate([getattr(t, name) for t in self.trees])
                   for name in _NODE_FIELDS}
            self._stacked = (cat, offsets)
        return self._stacked

    def _check_X(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected a matrix with {self.n_features} columns")
        return X

    def _predict_sums(self, X, row_cluster=None):
        X = self._check_X(X)
        cat, offsets = self._stack()
        if row_cluster is None:
            inbag = np.zeros((0, 0), dtype=np.bool_)
            row_cluster = np.zeros(len(X), dtype=np.int64)
        else:
            inbag = self.inbag_matrix()
        return _tree.predict_forest(cat["feature"], cat["threshold"], cat["left"],
                                    cat["right"], cat["value"], offsets,
                                    self._usable(), X, row_cluster, inbag)

    def inbag_matrix(self) -> np.ndarray:
        mat = np.zeros((len(self.trees), len(self.cluster_labels)), dtype=np.bool_)
        for t, tree in enumerate(self.trees):
            mat[t, tree.inbag_clusters] = True
        return mat

    def cluster_codes(self, clusters) -> np.ndarray:
        clusters = np.asarray(clusters)
        pos = np.searchsorted(self.cluster_labels, clusters)
        pos = np.clip(pos, 0, len(self.cluster_labels) - 1)
        if not np.all(self.cluster_labels[pos] == clusters):
            raise ValueError("clusters not seen during fitting")
        return pos.astype(np.int64)

    # -- serialization -------------------------------------------------
    def _tree_fields(self):
        return ("feature", "threshold", "left", "right", "value", "count",
                "structure_rows", "estimation_rows", "inbag_clusters")

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "params": asdict(self.params),
            "n_features": self.n_features,
            "cluster_labels": self.cluster_labels.tolist(),
            "trees": [{name: getattr(t, name).tolist() for name in self._tree_fields()}
                      for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def _trees_from(cls, doc, tree_cls):
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported format version {doc.get('format_version')}")
        if doc.get("kind") != cls.kind:
            raise ValueError(f"document holds a {doc.get('kind')}, not a {cls.kind}")
        trees = [tree_cls(**{k: np.asarray(v, dtype=_NODE_DTYPES[k]) for k, v in t.items()})
                 for t in doc["trees"]]
        return trees, ForestParams(**doc["params"])


class RegressionForest(ForestBase):
    kind = "regression_forest"

    def predict(self, X) -> np.ndarray:
        total, counts = self._predict_sums(X)
        return total / counts

    def predict_oob(self, X, clusters) -> np.ndarray:
        """Average only trees whose subsample excluded each row's cluster.

        Rows in-bag for every tree get NaN.
        """
        total, counts = self._predict_sums(X, self.cluster_codes(clusters))
        out = np.full(len(total), np.nan)
        ok = counts > 0
        out[ok] = total[ok] / counts[ok]
        return out

    @classmethod
    def from_dict(cls, doc) -> "RegressionForest":
        trees, params = cls._trees_from(doc, RegressionTree)
        return cls(trees, params, doc["n_features"], np.asarray(doc["cluster_labels"]))

    @classmethod
    def from_json(cls, text: str) -> "RegressionForest":
        return cls.from_dict(json.loads(text))


def _validate_xy(X, y, clusters):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    clusters = np.asarray(clusters)
    if X.ndim != 2:
        raise ValueError("X must be a matrix")
    if not len(X) == len(y) == len(clusters):
        raise ValueError("X, y and clusters must have the same number of rows")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValueError("X and y must be finite")
    return X, y, clusters


def fit_regression_forest(X, y, clusters, params: ForestParams | None = None
                          ) -> RegressionForest:
    """Fit a forest of CART trees on cluster-level subsamples.

    Leaves hold target means of their estimation rows.  The result is a
    deterministic function of ``params.seed``; ``params.n_threads`` only
    changes the schedule.
    """
    params = params or ForestParams()
    X, y, clusters = _validate_xy(X, y, clusters)
    if len(y) < 2 * params.min_leaf:
        raise ValueError(f"need at least {2 * params.min_leaf} rows, got {len(y)}")
    mtry = params.resolve_mtry(X.shape[1])
    index = ClusterIndex(clusters)

    def grow(stream):
        rng, kseed = stream
        inbag, srows, erows = draw_subsample(rng, index, params)
        out = _tree.grow_regression(X, y, srows, erows, mtry, params.min_leaf,
                                    params.imbalance_alpha, kseed)
        return RegressionTree(*out, structure_rows=srows, estimation_rows=erows,
                              inbag_clusters=inbag)

    trees = run_ordered(grow, tree_streams(params.seed, params.num_trees),
                        params.n_threads)
    return RegressionForest(trees, params, X.shape[1], index.labels)


def cluster_folds(clusters, folds: int, seed: int) -> np.ndarray:
    """Assign every row a fold id so that each cluster sits in one fold."""
    index = ClusterIndex(clusters)
    if index.n_clusters < folds:
        raise ValueError(f"{index.n_clusters} clusters cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(index.n_clusters)
    fold_of_cluster = np.empty(index.n_clusters, dtype=np.int64)
    fold_of_cluster[perm] = np.arange(index.n_clusters) % folds
    return fold_of_cluster[index.codes]


def crossfit_predict(X, y, clusters, params: ForestParams | None = None,
                     folds: int = 2, fold_ids=None, fit_mask=None) -> np.ndarray:
    """Out-of-fold forest predictions.

    For each fold a forest is fit on the other folds and predicts this one.
    ``fit_mask`` restricts which rows may be used for fitting (e.g. only the
    treated arm) while predictions are still produced for every row.
    """
    params = params or ForestParams()
    if folds < 2:
        raise ValueError("folds must be at least 2")
    X, y, clusters = _validate_xy(X, y, clusters)
    if fold_ids is None:
        fold_ids = cluster_folds(clusters, folds, params.seed)
    fold_ids = np.asarray(fold_ids)
    fit_mask = np.ones(len(y), dtype=bool) if fit_mask is None else np.asarray(fit_mask, bool)
    out = np.empty(len(y))
    for k in range(folds):
        held = fold_ids == k
        train = ~held & fit_mask
        if not held.any():
            continue
        if train.sum() < 2 * params.min_leaf:
            raise ValueError(f"fold {k}: only {int(train.sum())} training rows")
        forest = fit_regression_forest(X[train], y[train], clusters[train],
                                       replace(params, seed=params.seed + 7919 * (k + 1)))
        out[held] = forest.predict(X[held])
    return out
