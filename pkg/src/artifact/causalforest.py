"""Honest causal forest on residualized outcomes.

Each tree works on outcome residuals ``Y - m(X)`` and treatment residuals
``D - p(X)`` computed from cross-fitted nuisance forests.  Splits are scored
with per-row gradients of the node's residual-on-residual slope, and leaf
effects are re-estimated on the held-out (estimation) half of the subsample.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import _tree
from .regforest import (ClusterIndex, ForestBase, ForestParams, _validate_xy,
                        cluster_folds, crossfit_predict, draw_subsample,
                        run_ordered, tree_streams)

logger = logging.getLogger(__name__)

CLAMP = (0.01, 0.99)


@dataclass(frozen=True)
class NuisanceEstimates:
    """Cross-fitted plug-in predictions, one entry per observation.

    ``mu_hat`` is the pooled conditional mean E[Y | X] used to residualize
    outcomes; ``mu1_hat``/``mu0_hat`` are the arm-specific regressions used by
    the AIPW score.
    """

    p_hat: np.ndarray
    mu_hat: np.ndarray
    mu1_hat: np.ndarray
    mu0_hat: np.ndarray
    clamp: tuple[float, float] = CLAMP

    def __post_init__(self):
        n = len(self.p_hat)
        for name in ("mu_hat", "mu1_hat", "mu0_hat"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        lo, hi = self.clamp
        if np.any(self.p_hat < lo) or np.any(self.p_hat > hi):
            raise ValueError(f"p_hat outside clamp bounds [{lo}, {hi}]")

    def __len__(self):
        return len(self.p_hat)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in ("p_hat", "mu_hat", "mu1_hat", "mu0_hat"):
            h.update(np.ascontiguousarray(getattr(self, name), dtype=np.float64).tobytes())
        return h.hexdigest()

    def swapped(self) -> "NuisanceEstimates":
        """Nuisances for the relabeled problem D -> 1 - D."""
        lo, hi = self.clamp
        return NuisanceEstimates(1.0 - self.p_hat, self.mu_hat, self.mu0_hat,
                                 self.mu1_hat, (1.0 - hi, 1.0 - lo))


def estimate_nuisances(X, y, d, clusters, params: ForestParams | None = None,
                       folds: int = 2, clamp: tuple[float, float] = CLAMP,
                       seed: int | None = None) -> NuisanceEstimates:
    """Cross-fit propensity, pooled and arm-specific outcome forests.

    All four regressions share one cluster-level fold assignment, so every
    prediction for a row comes from forests that never saw its cluster.
    Cross-fitting already keeps predictions out-of-sample, so the default
    forests are not honest; honest nuisances leave a visible plug-in bias
    in the arm-specific means at moderate n.
    """
    params = params or ForestParams(honesty=False)
    if seed is not None:
        params = replace(params, seed=seed)
    X, y, clusters = _validate_xy(X, y, clusters)
    d = _check_treatment(d, len(y))
    lo, hi = clamp
    if not 0.0 < lo < hi < 1.0:
        raise ValueError("clamp bounds must satisfy 0 < lo < hi < 1")
    fold_ids = cluster_folds(clusters, folds, params.seed)
    dfl = d.astype(float)
    p_hat = crossfit_predict(X, dfl, clusters, replace(params, seed=params.seed + 1),
                             folds, fold_ids)
    mu_hat = crossfit_predict(X, y, clusters, replace(params, seed=params.seed + 2),
                              folds, fold_ids)
    mu1_hat = crossfit_predict(X, y, clusters, replace(params, seed=params.seed + 3),
                               folds, fold_ids, fit_mask=d == 1)
    mu0_hat = crossfit_predict(X, y, clusters, replace(params, seed=params.seed + 4),
                               folds, fold_ids, fit_mask=d == 0)
    return NuisanceEstimates(np.clip(p_hat, lo, hi), mu_hat, mu1_hat, mu0_hat, clamp)


def _check_treatment(d, n):
    d = np.asarray(d)
    if len(d) != n:
        raise ValueError("treatment vector has the wrong length")
    if not np.all((d == 0) | (d == 1)):
        raise ValueError("treatment must be binary 0/1")
    return d.astype(np.int64)


def robinson_theta(resid_y, resid_d, weights=None) -> float:
    """No-intercept least-squares slope of outcome residuals on treatment residuals."""
    ry = np.asarray(resid_y, dtype=float)
    rd = np.asarray(resid_d, dtype=float)
    if len(ry) != len(rd) or len(ry) == 0:
        raise ValueError("residual vectors must be non-empty and of equal length")
    w = np.ones_like(rd) if weights is None else np.asarray(weights, dtype=float)
    den = np.sum(w * rd * rd)
    if den <= 0.0:
        raise ValueError("no treatment variation")
    return float(np.sum(w * rd * ry) / den)


def split_gradients(resid_y, resid_d) -> np.ndarray:
    """Per-row gradients rho used to score candidate splits of a node.

    rho_i = rd_i * (ry_i - rd_i * theta) / mean(rd^2), with theta the node's
    residual slope.  Raises if the node has no treatment variation.
    """
    ry = np.asarray(resid_y, dtype=float)
    rd = np.asarray(resid_d, dtype=float)
    theta = robinson_theta(ry, rd)
    a_p = np.mean(rd * rd)
    return rd * (ry - rd * theta) / a_p


def split_criterion(rho, left_mask) -> float:
    """``(sum_L rho)^2 / n_L + (sum_R rho)^2 / n_R`` for one candidate split."""
    rho = np.asarray(rho, dtype=float)
    left_mask = np.asarray(left_mask, dtype=bool)
    sl, sr = rho[left_mask].sum(), rho[~left_mask].sum()
    return sl * sl / left_mask.sum() + sr * sr / (~left_mask).sum()


@dataclass
class CausalTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_treated: np.ndarray
    n_control: np.ndarray
    structure_rows: np.ndarray
    estimation_rows: np.ndarray
    inbag_clusters: np.ndarray
    degenerate: bool = False

    @property
    def theta(self) -> np.ndarray:
        return self.value

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature == _tree.LEAF)

    def apply(self, X) -> np.ndarray:
        return _tree.apply_tree(self.feature, self.threshold, self.left,
                                self.right, np.ascontiguousarray(X, dtype=float))

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for node in range(len(self.feature)):
            if self.feature[node] != _tree.LEAF:
                depth[self.left[node]] = depth[node] + 1
                depth[self.right[node]] = depth[node] + 1
        return int(depth.max())


def grow_causal_tree(X, resid_y, resid_d, d, structure_rows, estimation_rows,
                     mtry: int, min_node: int = 5, alpha: float = 0.05,
                     seed: int = 0, inbag_clusters=None) -> CausalTree:
    """Grow one honest causal tree from an already-drawn subsample.

    A subsample without both arms in each half yields a single degenerate
    leaf, which forests leave out of their averages.
    """
    srows = np.asarray(structure_rows, dtype=np.int64)
    erows = np.asarray(estimation_rows, dtype=np.int64)
    if np.intersect1d(srows, erows).size:
        raise ValueError("structure and estimation rows overlap")
    inbag = np.empty(0, dtype=np.int64) if inbag_clusters is None else inbag_clusters
    ds, de = d[srows], d[erows]
    if (len(srows) == 0 or len(erows) == 0 or ds.min() == ds.max()
            or de.min() == de.max()):
        return CausalTree(np.array([_tree.LEAF], dtype=np.int32), np.zeros(1),
                          np.array([-1], dtype=np.int32), np.array([-1], dtype=np.int32),
                          np.array([np.nan]),
                          np.array([int(de.sum())], dtype=np.int32),
                          np.array([int(len(de) - de.sum())], dtype=np.int32),
                          srows, erows, inbag, degenerate=True)
    out = _tree.grow_causal(X, resid_y, resid_d, d, srows, erows, mtry,
                            min_node, alpha, seed)
    return CausalTree(*out, structure_rows=srows, estimation_rows=erows,
                      inbag_clusters=inbag)


class CausalForest(ForestBase):
    kind = "causal_forest"

    def __init__(self, trees, params, n_features, cluster_labels,
                 nuisance_digest: str = ""):
        super().__init__(trees, params, n_features, cluster_labels)
        self.nuisance_digest = nuisance_digest

    def _usable(self):
        return np.array([not t.degenerate for t in self.trees], dtype=np.bool_)

    @property
    def n_degenerate(self) -> int:
        return int(np.sum(~self._usable()))

    def predict(self, X, return_counts: bool = False):
        """Average leaf effects over non-degenerate trees."""
        if not self._usable().any():
            raise ValueError("all trees are degenerate")
        total, counts = self._predict_sums(X)
        out = total / counts
        return (out, counts) if return_counts else out

    def predict_oob(self, X, clusters, return_counts: bool = False):
        """Out-of-bag effects for training rows; NaN where no tree qualifies."""
        if not self._usable().any():
            raise ValueError("all trees are degenerate")
        total, counts = self._predict_sums(X, self.cluster_codes(clusters))
        out = np.full(len(total), np.nan)
        ok = counts > 0
        out[ok] = total[ok] / counts[ok]
        return (out, counts) if return_counts else out

    def _tree_fields(self):
        return ("feature", "threshold", "left", "right", "value", "n_treated",
                "n_control", "structure_rows", "estimation_rows", "inbag_clusters")

    def to_dict(self):
        doc = super().to_dict()
        for t, tree in zip(doc["trees"], self.trees):
            t["value"] = [None if np.isnan(v) else v for v in tree.value.tolist()]
            t["degenerate"] = tree.degenerate
        doc["nuisance_digest"] = self.nuisance_digest
        return doc

    @classmethod
    def from_dict(cls, doc) -> "CausalForest":
        raw = [dict(t) for t in doc["trees"]]
        flags = [t.pop("degenerate") for t in raw]
        for t in raw:
            t["value"] = [np.nan if v is None else v for v in t["value"]]
        trees, params = cls._trees_from({**doc, "trees": raw}, CausalTree)
        for tree, flag in zip(trees, flags):
            tree.degenerate = bool(flag)
        return cls(trees, params, doc["n_features"], np.asarray(doc["cluster_labels"]),
                   doc.get("nuisance_digest", ""))

    @classmethod
    def from_json(cls, text: str) -> "CausalForest":
        return cls.from_dict(json.loads(text))


def fit_causal_forest(X, y, d, clusters, nuisances: NuisanceEstimates,
                      params: ForestParams | None = None) -> CausalForest:
    """Grow ``params.num_trees`` honest causal trees.

    ``params.min_leaf`` is the per-arm minimum in every child (5 treated and
    5 control by default).
    """
    params = params or ForestParams()
    if not params.honesty:
        raise ValueError("causal forests are always honest")
    X, y, clusters = _validate_xy(X, y, clusters)
    d = _check_treatment(d, len(y))
    if len(nuisances) != len(y):
        raise ValueError("nuisance estimates do not match the data")
    resid_y = np.ascontiguousarray(y - nuisances.mu_hat)
    resid_d = np.ascontiguousarray(d - nuisances.p_hat)
    mtry = params.resolve_mtry(X.shape[1])
    index = ClusterIndex(clusters)

    def grow(stream):
        rng, kseed = stream
        inbag, srows, erows = draw_subsample(rng, index, params)
        return grow_causal_tree(X, resid_y, resid_d, d, srows, erows, mtry,
                                params.min_leaf, params.imbalance_alpha, kseed,
                                inbag_clusters=inbag)

    trees = run_ordered(grow, tree_streams(params.seed, params.num_trees),
                        params.n_threads)
    forest = CausalForest(trees, params, X.shape[1], index.labels, nuisances.digest())
    if forest.n_degenerate:
        logger.warning("%d of %d causal trees are degenerate and excluded",
                       forest.n_degenerate, len(trees))
    if forest.n_degenerate == len(trees):
        raise ValueError("all trees are degenerate")
    return forest


def predict_cate(forest: CausalForest, X_new) -> np.ndarray:
    return forest.predict(X_new)


def cate_histogram(psi, bin_width: float):
    """Histogram with bins of fixed width anchored at ``floor(min / width) * width``.

    Returns (edges, counts) with ``len(edges) == len(counts) + 1``.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.size == 0:
        raise ValueError("empty CATE vector")
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    lo = np.floor(psi.min() / bin_width) * bin_width
    n_bins = max(1, int(np.floor((psi.max() - lo) / bin_width)) + 1)
    edges = lo + bin_width * np.arange(n_bins + 1)
    idx = np.clip(np.floor((psi - lo) / bin_width).astype(np.int64), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return edges, counts
