"""Group average treatment effects from doubly-robust scores."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .dr_scores import DoublyRobustScores, cluster_sums

Z_95 = 1.96


@dataclass(frozen=True)
class GroupScheme:
    name: str
    assignment: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        a = np.asarray(self.assignment)
        if a.size and (a.min() < 0 or a.max() >= len(self.labels)):
            raise ValueError("group index out of range")
        sizes = np.bincount(a, minlength=len(self.labels))
        empty = [self.labels[g] for g in np.flatnonzero(sizes == 0)]
        if empty:
            raise ValueError(f"empty groups: {empty}")

    @property
    def n_groups(self) -> int:
        return len(self.labels)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_groups)


def scheme_from_labels(name: str, values, order=None) -> GroupScheme:
    """Group rows by the distinct values of a label vector."""
    values = np.asarray(values).astype(str)
    labels = list(order) if order is not None else sorted(set(values.tolist()))
    present = [lab for lab in labels if np.any(values == lab)]
    lookup = {lab: g for g, lab in enumerate(present)}
    missing = set(values.tolist()) - set(lookup)
    if missing:
        raise ValueError(f"values without a group: {sorted(missing)}")
    return GroupScheme(name, np.array([lookup[v] for v in values], dtype=np.int64),
                       tuple(present))


def quartile_groups(values, name: str = "spend_quartile") -> GroupScheme:
    """Empirical quartile groups; values equal to a cut point go to the lower group.

    Quartiles left empty by ties are dropped, so heavy tie blocks (e.g. many
    zero spenders) can yield fewer than four groups.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 4:
        raise ValueError("need at least four values")
    if values.min() == values.max():
        raise ValueError("degenerate grouping: constant values")
    cuts = np.quantile(values, [0.25, 0.5, 0.75])
    raw = np.searchsorted(cuts, values, side="left")
    used = np.unique(raw)
    remap = np.full(4, -1)
    remap[used] = np.arange(len(used))
    labels = tuple(f"Q{q + 1}" for q in used)
    return GroupScheme(name, remap[raw].astype(np.int64), labels)


def cross_scheme(a: GroupScheme, b: GroupScheme) -> GroupScheme:
    """Groups defined by the joint value of two schemes (empty cells dropped)."""
    joint = a.assignment * b.n_groups + b.assignment
    used = np.unique(joint)
    remap = {int(j): g for g, j in enumerate(used)}
    labels = tuple(f"{a.labels[j // b.n_groups]} x {b.labels[j % b.n_groups]}" for j in used)
    return GroupScheme(f"{a.name}_x_{b.name}",
                       np.array([remap[int(j)] for j in joint], dtype=np.int64), labels)


@dataclass(frozen=True)
class GateResult:
    labels: tuple[str, ...]
    coef: np.ndarray
    std_error: np.ndarray
    sizes: np.ndarray

    @property
    def ci_low(self) -> np.ndarray:
        return self.coef - Z_95 * self.std_error

    @property
    def ci_high(self) -> np.ndarray:
        return self.coef + Z_95 * self.std_error


def estimate_gates(scores: DoublyRobustScores, scheme: GroupScheme) -> GateResult:
    """Intercept-free regression of scores on group indicators.

    The design is orthogonal, so each coefficient is its group's mean score and
    the cluster sandwich splits into one block per group.
    """
    g = np.asarray(scheme.assignment)
    if len(g) != len(scores):
        raise ValueError("scheme and scores differ in length")
    gamma = scores.gamma
    coef = np.empty(scheme.n_groups)
    se = np.empty(scheme.n_groups)
    for k in range(scheme.n_groups):
        mask = g == k
        if len(np.unique(scores.clusters[mask])) < 2:
            raise ValueError(f"group {scheme.labels[k]!r} has a single cluster")
        coef[k] = gamma[mask].mean()
        s = cluster_sums(gamma[mask] - coef[k], scores.clusters[mask])
        se[k] = np.sqrt(np.sum(s * s)) / mask.sum()
    return GateResult(scheme.labels, coef, se, scheme.sizes())


def gate_export(result: GateResult) -> str:
    buf = io.StringIO()
    buf.write("group_label,coef,se,ci_lo,ci_hi\n")
    for lab, c, s, lo, hi in zip(result.labels, result.coef, result.std_error,
                                 result.ci_low, result.ci_high):
        buf.write(f"{lab},{c:.6g},{s:.6g},{lo:.6g},{hi:.6g}\n")
    return buf.getvalue()
