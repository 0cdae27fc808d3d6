"""Exact depth-k policy trees over discretized covariates.

Every feature is mapped to integer level codes; a split ``x <= v`` sends level
codes up to the code of ``v`` left.  The search maximizes the summed reward of
the chosen leaf actions, treating a leaf as ``+sum(psi)`` and a no-treatment
leaf as ``-sum(psi)``.  Depth one and two are solved from per-level reward
histograms; deeper trees recurse over root splits.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

TREAT, NO_TREAT = 1, 0


@dataclass(frozen=True)
class BinningRule:
    """Round to the nearest ``step`` inside each [lo, hi) band, half up.

    Values at or above ``top`` collapse to ``top``.
    """

    bands: tuple[tuple[float, float, float], ...] = ((0.0, 1000.0, 50.0),
                                                     (1000.0, 2000.0, 100.0))
    top: float = 2000.0

    def apply(self, values) -> np.ndarray:
        return bin_expenditures(values, self)


def bin_expenditures(values, rule: BinningRule | None = None) -> np.ndarray:
    rule = rule or BinningRule()
    v = np.asarray(values, dtype=float)
    if np.any(v < 0) or np.any(np.isnan(v)):
        raise ValueError("expenditures must be non-negative")
    out = np.full(v.shape, rule.top)
    for lo, hi, step in rule.bands:
        mask = (v >= lo) & (v < hi)
        out[mask] = np.floor(v[mask] / step + 0.5) * step
    out = np.minimum(out, rule.top)
    return out


def round_to_step(values, step: float) -> np.ndarray:
    """Half-up rounding to a fixed grid, used for other continuous covariates."""
    if step <= 0:
        raise ValueError("step must be positive")
    return np.floor(np.asarray(values, dtype=float) / step + 0.5) * step


def policy_value(actions, psi) -> float:
    """Mean of ``(2 * action - 1) * psi``."""
    actions = np.asarray(actions)
    psi = np.asarray(psi, dtype=float)
    if len(actions) != len(psi):
        raise ValueError("actions and rewards differ in length")
    if len(psi) == 0:
        raise ValueError("empty input")
    if not np.all((actions == 0) | (actions == 1)):
        raise ValueError("actions must be 0 or 1")
    return float(np.sum((2.0 * actions - 1.0) * psi) / len(psi))


@dataclass
class PolicyTree:
    """Nodes in preorder; internal ``(feature, threshold, left, right)``, leaf ``action``."""

    feature: list[int]
    threshold: list[float]
    left: list[int]
    right: list[int]
    action: list[int]
    requested_depth: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    @property
    def depth(self) -> int:
        def walk(node):
            if self.is_leaf(node):
                return 0
            return 1 + max(walk(self.left[node]), walk(self.right[node]))
        return walk(0)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.empty(len(X), dtype=np.int64)
        for i, row in enumerate(X):
            node = 0
            while not self.is_leaf(node):
                node = self.left[node] if row[self.feature[node]] <= self.threshold[node] \
                    else self.right[node]
            out[i] = self.action[node]
        return out

    def to_dict(self, feature_names=None) -> dict:
        nodes = []
        for k in range(self.n_nodes):
            if self.is_leaf(k):
                nodes.append({"action": self.action[k]})
            else:
                entry = {"feature": self.feature[k], "threshold": self.threshold[k],
                         "left": self.left[k], "right": self.right[k]}
                if feature_names is not None:
                    entry["feature_name"] = feature_names[self.feature[k]]
                nodes.append(entry)
        return {"depth": self.depth, "nodes": nodes}

    def to_json(self, feature_names=None) -> str:
        return json.dumps(self.to_dict(feature_names), indent=2)

    @classmethod
    def from_dict(cls, doc) -> "PolicyTree":
        tree = cls([], [], [], [], [])
        for node in doc["nodes"]:
            if "action" in node:
                tree._append(-1, 0.0, -1, -1, int(node["action"]))
            else:
                tree._append(int(node["feature"]), float(node["threshold"]),
                             int(node["left"]), int(node["right"]), -1)
        return tree

    def _append(self, f, t, l, r, a) -> int:
        self.feature.append(f)
        self.threshold.append(t)
        self.left.append(l)
        self.right.append(r)
        self.action.append(a)
        return len(self.feature) - 1


# -- compiled search kernels -------------------------------------------------

@njit(cache=True, nogil=True)
def _leaf_action(total):
    return 1 if total > 0.0 else 0


@njit(cache=True, nogil=True)
def _best_depth1(hist, cnt, n_levels):
    """Best depth-1 tree from per-feature level histograms.

    Returns (value, feature, level); feature == -1 means a single leaf.
    """
    total = 0.0
    for lvl in range(n_levels[0]):
        total += hist[0, lvl]
    best = abs(total)
    best_f = -1
    best_l = -1
    for f in range(hist.shape[0]):
        s_left = 0.0
        c_left = 0
        c_tot = 0
        for lvl in range(n_levels[f]):
            c_tot += cnt[f, lvl]
        for lvl in range(n_levels[f] - 1):
            s_left += hist[f, lvl]
            c_left += cnt[f, lvl]
            if c_left == 0:
                continue
            if c_left == c_tot:
                break
            val = abs(s_left) + abs(total - s_left)
            if val > best:
                best = val
                best_f = f
                best_l = lvl
    return best, best_f, best_l


@njit(cache=True, nogil=True)
def _histograms(codes, psi, rows, n_levels, max_levels):
    p = codes.shape[1]
    hist = np.zeros((p, max_levels))
    cnt = np.zeros((p, max_levels), dtype=np.int64)
    for r in rows:
        for f in range(p):
            hist[f, codes[r, f]] += psi[r]
            cnt[f, codes[r, f]] += 1
    return hist, cnt


@njit(cache=True, nogil=True)
def _depth1_on_rows(codes, psi, rows, n_levels, max_levels):
    hist, cnt = _histograms(codes, psi, rows, n_levels, max_levels)
    return _best_depth1(hist, cnt, n_levels)


@njit(cache=True, nogil=True)
def _best_depth2(codes, psi, rows, n_levels, max_levels):
    """Exact depth-2 search on a row subset.

    Returns (value, root_f, root_l, left_f, left_l, right_f, right_l); a
    root_f of -1 means the best tree is smaller than depth 2 and the caller
    should fall back to depth 1.
    """
    p = codes.shape[1]
    h_tot, c_tot = _histograms(codes, psi, rows, n_levels, max_levels)
    v1, f1, l1 = _best_depth1(h_tot, c_tot, n_levels)
    best = v1
    res = (best, -1, -1, -1, -1, -1, -1)
    n = rows.shape[0]
    h_l = np.zeros((p, max_levels))
    c_l = np.zeros((p, max_levels), dtype=np.int64)
    h_r = np.zeros((p, max_levels))
    c_r = np.zeros((p, max_levels), dtype=np.int64)
    for j in range(p):
        # bucket rows by their level on the root feature
        starts = np.zeros(n_levels[j] + 1, dtype=np.int64)
        for r in rows:
            starts[codes[r, j] + 1] += 1
        for lvl in range(n_levels[j]):
            starts[lvl + 1] += starts[lvl]
        fill = starts.copy()
        ordered = np.empty(n, dtype=rows.dtype)
        for r in rows:
            ordered[fill[codes[r, j]]] = r
            fill[codes[r, j]] += 1
        h_l[:, :] = 0.0
        c_l[:, :] = 0
        moved = 0
        for lvl in range(n_levels[j] - 1):
            for idx in range(starts[lvl], starts[lvl + 1]):
                r = ordered[idx]
                for f in range(p):
                    h_l[f, codes[r, f]] += psi[r]
                    c_l[f, codes[r, f]] += 1
            moved = starts[lvl + 1]
            if moved == 0:
                continue
            if moved == n:
                break
            for f in range(p):
                for k in range(n_levels[f]):
                    h_r[f, k] = h_tot[f, k] - h_l[f, k]
                    c_r[f, k] = c_tot[f, k] - c_l[f, k]
            vl, fl, ll = _best_depth1(h_l, c_l, n_levels)
            vr, fr, lr = _best_depth1(h_r, c_r, n_levels)
            val = vl + vr
            if val > best:
                best = val
                res = (val, j, lvl, fl, ll, fr, lr)
    if res[1] == -1:
        return (v1, -1, -1, f1, l1, -1, -1)
    return res


# -- search driver -----------------------------------------------------------

class _Problem:
    def __init__(self, X, psi, n_threads):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be a matrix")
        self.values = []
        codes = np.empty(X.shape, dtype=np.int64)
        for j in range(X.shape[1]):
            vals, inv = np.unique(X[:, j], return_inverse=True)
            self.values.append(vals)
            codes[:, j] = inv
        self.codes = np.ascontiguousarray(codes)
        self.n_levels = np.array([len(v) for v in self.values], dtype=np.int64)
        self.max_levels = int(self.n_levels.max())
        self.psi = np.ascontiguousarray(psi, dtype=float)
        self.n_threads = n_threads

    def leaf_sum(self, rows):
        return float(np.sum(self.psi[rows]))

    def split(self, rows, f, lvl):
        mask = self.codes[rows, f] <= lvl
        return rows[mask], rows[~mask]


def _search(prob: _Problem, rows, depth):
    """Return (value, subtree) where subtree is a nested tuple description."""
    if depth == 0:
        s = prob.leaf_sum(rows)
        return abs(s), ("leaf", _leaf_action(s))
    if depth == 1:
        val, f, lvl = _depth1_on_rows(prob.codes, prob.psi, rows, prob.n_levels,
                                      prob.max_levels)
        if f < 0:
            return _search(prob, rows, 0)
        left, right = prob.split(rows, f, lvl)
        return val, ("split", f, lvl, _search(prob, left, 0)[1], _search(prob, right, 0)[1])
    if depth == 2:
        out = _best_depth2(prob.codes, prob.psi, rows, prob.n_levels, prob.max_levels)
        val, j, lvl = out[0], out[1], out[2]
        if j < 0:
            return _search(prob, rows, 1)
        left, right = prob.split(rows, j, lvl)
        return val, ("split", j, lvl, _search(prob, left, 1)[1], _search(prob, right, 1)[1])

    best_val, best_tree = _search(prob, rows, depth - 1)
    candidates = []
    for j in range(prob.codes.shape[1]):
        present = np.unique(prob.codes[rows, j])
        for lvl in present[:-1]:
            candidates.append((j, int(lvl)))

    def evaluate(cand):
        j, lvl = cand
        left, right = prob.split(rows, j, lvl)
        vl, tl = _search(prob, left, depth - 1)
        vr, tr = _search(prob, right, depth - 1)
        return vl + vr, ("split", j, lvl, tl, tr)

    if prob.n_threads > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=prob.n_threads) as pool:
            results = list(pool.map(evaluate, candidates))
    else:
        results = [evaluate(c) for c in candidates]
    # candidates are in (feature, level) order, so strict '>' keeps the lowest
    for val, tree in results:
        if val > best_val:
            best_val, best_tree = val, tree
    return best_val, best_tree


def _collapse(sub):
    """Merge sibling leaves that take the same action."""
    if sub[0] == "leaf":
        return sub
    _, f, lvl, left, right = sub
    left, right = _collapse(left), _collapse(right)
    if left[0] == "leaf" and right[0] == "leaf" and left[1] == right[1]:
        return left
    return ("split", f, lvl, left, right)


def _materialize(prob: _Problem, sub, tree: PolicyTree):
    if sub[0] == "leaf":
        return tree._append(-1, 0.0, -1, -1, sub[1])
    _, f, lvl, left, right = sub
    node = tree._append(f, float(prob.values[f][lvl]), -1, -1, -1)
    tree.left[node] = _materialize(prob, left, tree)
    tree.right[node] = _materialize(prob, right, tree)
    return node


def fit_policy_tree(X, psi, depth: int = 3, cost: float = 0.0,
                    n_threads: int = 1) -> tuple[PolicyTree, float]:
    """Exhaustive search for the depth-``depth`` tree maximizing the policy value.

    Thresholds are observed values of X.  Ties go to the lowest feature index,
    then the lowest threshold; value-tied leaves take no treatment.  Sibling
    leaves with the same action are merged, so the returned tree can be
    shallower than requested.  ``cost`` is subtracted from every reward.
    """
    if depth < 1:
        raise ValueError("depth must be at least 1")
    psi = np.asarray(psi, dtype=float) - cost
    X = np.asarray(X, dtype=float)
    if len(X) != len(psi) or len(psi) == 0:
        raise ValueError("X and psi must be non-empty with matching rows")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(psi)):
        raise ValueError("X and psi must be finite")
    prob = _Problem(X, psi, n_threads)
    _, sub = _search(prob, np.arange(len(psi), dtype=np.int64), depth)
    tree = PolicyTree([], [], [], [], [], requested_depth=depth)
    _materialize(prob, _collapse(sub), tree)
    if tree.depth < depth:
        logger.info("policy tree collapsed from depth %d to %d", depth, tree.depth)
    return tree, policy_value(tree.predict(X), psi)


def _leaf_label(action: int) -> str:
    return "treat" if action == TREAT else "no coupon"


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def render_policy_tree(tree: PolicyTree, feature_names=None) -> dict[str, str]:
    """Rule list and DOT graph for a fitted tree."""
    names = feature_names or [f"x{j}" for j in range(max(tree.feature + [0]) + 1)]
    rules = []

    def walk(node, conds):
        if tree.is_leaf(node):
            cond = " and ".join(conds) if conds else "always"
            rules.append(f"if {cond}: {_leaf_label(tree.action[node])}")
            return
        name, thr = names[tree.feature[node]], _fmt(tree.threshold[node])
        walk(tree.left[node], conds + [f"{name} <= {thr}"])
        walk(tree.right[node], conds + [f"{name} > {thr}"])

    walk(0, [])
    dot = ["digraph policy_tree {", "  node [shape=box];"]
    for k in range(tree.n_nodes):
        if tree.is_leaf(k):
            dot.append(f'  n{k} [label="{_leaf_label(tree.action[k])}", shape=ellipse];')
        else:
            dot.append(f'  n{k} [label="{names[tree.feature[k]]} <= '
                       f'{_fmt(tree.threshold[k])}"];')
    for k in range(tree.n_nodes):
        if not tree.is_leaf(k):
            dot.append(f'  n{k} -> n{tree.left[k]} [label="yes"];')
            dot.append(f'  n{k} -> n{tree.right[k]} [label="no"];')
    dot.append("}")
    return {"rules": "\n".join(rules) + "\n", "dot": "\n".join(dot) + "\n"}
