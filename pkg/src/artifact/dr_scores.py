"""Doubly-robust scores, ATE estimates and cluster-robust standard errors."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import stats

SIGNIFICANCE_LEGEND = ". p<0.1, * p<0.05, ** p<0.01, *** p<0.001"
_STARS = ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, "."))


@dataclass(frozen=True)
class DoublyRobustScores:
    gamma: np.ndarray
    clusters: np.ndarray
    estimand_label: str = "ATE"

    def __post_init__(self):
        if len(self.gamma) != len(self.clusters):
            raise ValueError("gamma and clusters differ in length")
        bad = np.flatnonzero(~np.isfinite(self.gamma))
        if bad.size:
            raise ValueError(f"non-finite score at row {int(bad[0])}")

    def __len__(self):
        return len(self.gamma)


@dataclass(frozen=True)
class AteResult:
    theta: float
    std_error: float
    n: int
    n_clusters: int
    label: str = "ATE"

    @property
    def z(self) -> float:
        if self.std_error == 0:
            return np.inf if self.theta != 0 else 0.0
        return self.theta / self.std_error

    @property
    def p_value(self) -> float:
        return float(2 * stats.norm.sf(abs(self.z)))

    @property
    def significance_code(self) -> str:
        return significance_stars(self.p_value)


def significance_stars(p_value: float) -> str:
    for cut, code in _STARS:
        if p_value < cut:
            return code
    return ""


def aipw_scores(y, d, nuisances, clusters, label: str = "ATE") -> DoublyRobustScores:
    """AIPW score per row.

    gamma = mu1 - mu0 + D (Y - mu1) / p - (1 - D) (Y - mu0) / (1 - p)
    """
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    p = np.asarray(nuisances.p_hat, dtype=float)
    mu1 = np.asarray(nuisances.mu1_hat, dtype=float)
    mu0 = np.asarray(nuisances.mu0_hat, dtype=float)
    lo, hi = nuisances.clamp
    if np.any(p < lo) or np.any(p > hi):
        raise ValueError(f"propensities must lie in [{lo}, {hi}]")
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = mu1 - mu0 + d * (y - mu1) / p - (1 - d) * (y - mu0) / (1 - p)
    return DoublyRobustScores(gamma, np.asarray(clusters), label)


def cluster_sums(values, clusters) -> np.ndarray:
    """Sum of values within each cluster (clusters in sorted label order)."""
    _, codes = np.unique(np.asarray(clusters), return_inverse=True)
    return np.bincount(codes, weights=np.asarray(values, dtype=float))


def clustered_mean_se(values, clusters) -> tuple[float, float]:
    """Mean and its cluster-robust standard error.

    var = sum_c (sum_{i in c} (v_i - mean))^2 / N^2, no small-sample factor.
    """
    values = np.asarray(values, dtype=float)
    n = len(values)
    theta = float(values.mean())
    s = cluster_sums(values - theta, clusters)
    return theta, float(np.sqrt(np.sum(s * s)) / n)


def estimate_ate(scores: DoublyRobustScores) -> AteResult:
    n_clusters = len(np.unique(scores.clusters))
    if n_clusters < 2:
        raise ValueError("cannot cluster: fewer than two clusters")
    theta, se = clustered_mean_se(scores.gamma, scores.clusters)
    return AteResult(theta, se, len(scores), n_clusters, scores.estimand_label)


def robinson_ate(y, d, nuisances, clusters, label: str = "ATE (partialling-out)") -> AteResult:
    """Residual-on-residual slope over the full sample with a clustered sandwich SE."""
    ry = np.asarray(y, dtype=float) - nuisances.mu_hat
    rd = np.asarray(d, dtype=float) - nuisances.p_hat
    den = np.sum(rd * rd)
    if den <= 0:
        raise ValueError("no treatment variation")
    theta = float(np.sum(rd * ry) / den)
    s = cluster_sums(rd * (ry - rd * theta), clusters)
    se = float(np.sqrt(np.sum(s * s)) / den)
    n_clusters = len(np.unique(clusters))
    if n_clusters < 2:
        raise ValueError("cannot cluster: fewer than two clusters")
    return AteResult(theta, se, len(ry), n_clusters, label)


def difference_in_means(y, d, clusters, label: str = "naive difference") -> AteResult:
    """Unadjusted treated-minus-control mean with a clustered SE."""
    y = np.asarray(y, dtype=float)
    d = np.asarray(d)
    t, c = d == 1, d == 0
    n1, n0 = t.sum(), c.sum()
    if n1 == 0 or n0 == 0:
        raise ValueError("both arms must be non-empty")
    m1, m0 = y[t].mean(), y[c].mean()
    # influence function of the difference of two means
    psi = np.where(t, (y - m1) / n1, -(y - m0) / n0) * len(y)
    s = cluster_sums(psi, clusters)
    se = float(np.sqrt(np.sum(s * s)) / len(y))
    return AteResult(float(m1 - m0), se, len(y), len(np.unique(clusters)), label)


def ate_table(results) -> dict[str, str]:
    """Render results as ``{"csv": ..., "text": ...}``."""
    results = list(results)
    buf = io.StringIO()
    buf.write("estimand,coef,se,stars\n")
    for r in results:
        buf.write(f"{_csv_field(r.label)},{r.theta:.6g},{r.std_error:.6g},"
                  f"{r.significance_code}\n")
    width = max([len(r.label) for r in results] + [8])
    lines = [f"{'':<{width}}  {'Coef.':>10}  {'Std. Error':>10}  Sign.",
             "-" * (width + 32)]
    for r in results:
        lines.append(f"{r.label:<{width}}  {r.theta:>10.2f}  {r.std_error:>10.3f}  "
                     f"{r.significance_code}")
    lines.append("-" * (width + 32))
    lines.append(f"Significance levels: {SIGNIFICANCE_LEGEND}")
    return {"csv": buf.getvalue(), "text": "\n".join(lines) + "\n"}


def _csv_field(text: str) -> str:
    if any(ch in text for ch in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text


def scores_csv(scores: DoublyRobustScores, customer_ids, period_ids) -> str:
    buf = io.StringIO()
    buf.write("row_id,customer_id,period_id,gamma\n")
    for i, (g, c, t) in enumerate(zip(scores.gamma, customer_ids, period_ids)):
        buf.write(f"{i},{c},{t},{g:.17g}\n")
    return buf.getvalue()
