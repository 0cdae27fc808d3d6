"""Synthetic coupon campaigns with known propensity, baseline and effects.

Customers get Table-1-like socio-economic attributes plus a standard normal
score ``x1``.  Each period a customer receives at least one coupon with
probability p(X); daily spend is baseline(X) + D * tau(X) + noise.  Treatment
depends on static attributes only, so selection is on observables, and both
baseline and propensity rise with ``x1`` and fall for unknown attributes, so
a naive comparison of arms is confounded.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .datamodel import (DEFAULT_CATEGORIES, SOCIO_SCHEMA, UNKNOWN, CampaignPeriod,
                        PanelDataset, build_panel)

TAU_SPECS = ("constant", "threshold", "signed", "linear")
PROPENSITY_SPECS = ("uniform", "logistic", "unknown_penalized")
OVERLAP = (0.05, 0.95)

# level shares among customers with known attributes
_LEVEL_SHARES = {
    "age_group": [0.06, 0.17, 0.25, 0.36, 0.07, 0.09],
    "family_size": [0.33, 0.40, 0.14, 0.06, 0.07],
    "marital_status": [0.74, 0.26],
    "dwelling": [0.05, 0.95],
    "income_group": [0.08, 0.09, 0.09, 0.22, 0.25, 0.12, 0.04, 0.05, 0.035, 0.0125,
                     0.0065, 0.012],
}


@dataclass(frozen=True)
class DgpConfig:
    n_customers: int = 1000
    n_periods: int = 5
    tau_spec: str = "constant"
    tau_scale: float = 10.0
    propensity_spec: str = "logistic"
    propensity_q: float = 0.3
    noise_sd: float = 20.0
    missing_rate: float = 0.52
    marital_extra_missing: float = 0.43
    redeem_rate: float = 0.03
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    seed: int = 0

    def __post_init__(self):
        if self.tau_spec not in TAU_SPECS:
            raise ValueError(f"tau_spec must be one of {TAU_SPECS}")
        if self.propensity_spec not in PROPENSITY_SPECS:
            raise ValueError(f"propensity_spec must be one of {PROPENSITY_SPECS}")
        if self.n_customers < 2 or self.n_periods < 2:
            raise ValueError("need at least two customers and two periods")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        lo, hi = OVERLAP
        if self.propensity_spec != "logistic" and not lo < self.propensity_q < hi:
            raise ValueError(f"propensity q={self.propensity_q} violates overlap ({lo}, {hi})")
        if self.propensity_spec == "unknown_penalized" and not lo < 0.6 * self.propensity_q:
            raise ValueError("penalized propensity for unknown customers violates overlap")


@dataclass(frozen=True)
class GroundTruth:
    tau: np.ndarray
    propensity: np.ndarray
    baseline: np.ndarray


@dataclass
class SimulatedTables:
    customers: pd.DataFrame
    transactions: pd.DataFrame
    coupons: pd.DataFrame
    periods: list[CampaignPeriod]
    truth: pd.DataFrame = field(repr=False)


def tau_function(spec: str, scale: float, x1: np.ndarray) -> np.ndarray:
    if spec == "constant":
        return np.full_like(x1, scale, dtype=float)
    if spec == "threshold":
        return scale * (x1 > 0)
    if spec == "signed":
        return scale * np.sign(x1)
    return scale * x1


def _draw_customers(cfg: DgpConfig, rng: np.random.Generator) -> pd.DataFrame:
    n = cfg.n_customers
    unknown = rng.random(n) < cfg.missing_rate
    data = {"customer_id": [f"c{i:05d}" for i in range(n)]}
    for spec in SOCIO_SCHEMA:
        known_levels = [lev for lev in spec.levels if lev != UNKNOWN]
        shares = np.asarray(_LEVEL_SHARES[spec.name])
        draw = rng.choice(len(known_levels), size=n, p=shares / shares.sum())
        labels = np.asarray(known_levels, dtype=object)[draw]
        missing = unknown.copy()
        if spec.name == "marital_status":
            missing |= rng.random(n) < cfg.marital_extra_missing
        labels[missing] = UNKNOWN
        data[spec.name] = labels
    data["x1"] = rng.standard_normal(n)
    return pd.DataFrame(data)


def _static_signals(customers: pd.DataFrame, cfg: DgpConfig):
    x1 = customers["x1"].to_numpy()
    unknown = (customers["age_group"] == UNKNOWN).to_numpy().astype(float)
    income = pd.to_numeric(customers["income_group"], errors="coerce").fillna(0).to_numpy()
    owned = (customers["dwelling"] == "owned").to_numpy().astype(float)
    baseline = 180.0 + 25.0 * x1 - 40.0 * unknown + 4.0 * income + 10.0 * owned
    if cfg.propensity_spec == "uniform":
        p = np.full(len(x1), cfg.propensity_q)
    elif cfg.propensity_spec == "unknown_penalized":
        p = np.where(unknown == 1, 0.6 * cfg.propensity_q, cfg.propensity_q)
    else:
        lo, hi = OVERLAP
        p = lo + (hi - lo) * expit(-0.9 + 1.2 * x1 - 0.8 * unknown + 0.05 * income)
    return x1, baseline, p


def simulate_tables(cfg: DgpConfig) -> SimulatedTables:
    """Draw raw customer/transaction/coupon tables plus per-row truth."""
    rng = np.random.default_rng(cfg.seed)
    customers = _draw_customers(cfg, rng)
    x1, static_base, p = _static_signals(customers, cfg)
    tau = tau_function(cfg.tau_spec, cfg.tau_scale, x1)
    lo, hi = OVERLAP
    if np.any(p <= lo) or np.any(p >= hi):
        raise ValueError("propensities violate overlap")

    n, T, K = cfg.n_customers, cfg.n_periods, len(cfg.categories)
    lengths = rng.integers(5, 15, size=T)
    starts = np.concatenate([[1], 1 + np.cumsum(lengths)[:-1]])
    ends = starts + lengths - 1
    period_effect = rng.normal(0.0, 10.0, size=T)

    D = rng.random((n, T)) < p[:, None]
    # every period needs coupons so the partition reproduces the windows
    for t in range(T):
        if not D[:, t].any():
            D[rng.integers(n), t] = True
        if D[:, t].all():
            D[rng.integers(n), t] = False
    cats = rng.random((n, T, K)) < 0.4
    none = ~cats.any(axis=2)
    pick = rng.integers(K, size=(n, T))
    ci, ti = np.nonzero(none)
    cats[ci, ti, pick[ci, ti]] = True
    cats &= D[:, :, None]

    base = static_base[:, None] + period_effect[None, :]
    noise = rng.normal(0.0, cfg.noise_sd, size=(n, T)) if cfg.noise_sd > 0 else np.zeros((n, T))
    y = np.maximum(base + D * tau[:, None] + noise, 0.0)

    ids = customers["customer_id"].to_numpy()
    amount = y * lengths[None, :]
    tc, tt = np.nonzero(amount > 0)
    transactions = pd.DataFrame({"customer_id": ids[tc], "day": starts[tt],
                                 "amount": amount[tc, tt]})

    cc, ct, ck = np.nonzero(cats)
    redeem = rng.random(len(cc)) < cfg.redeem_rate
    offset = (rng.random(len(cc)) * lengths[ct]).astype(int)
    redeemed_day = np.where(redeem, starts[ct] + offset, -1)
    coupons = pd.DataFrame({
        "customer_id": ids[cc],
        "category": np.asarray(cfg.categories, dtype=object)[ck],
        "start_day": starts[ct], "end_day": ends[ct],
        "redeemed_day": pd.array(np.where(redeemed_day >= 0, redeemed_day, 0),
                                 dtype="Int64"),
    })
    coupons.loc[redeemed_day < 0, "redeemed_day"] = pd.NA

    periods = [CampaignPeriod(int(s), int(e), frozenset(
        np.asarray(cfg.categories)[cats[:, t].any(axis=0)].tolist()))
        for t, (s, e) in enumerate(zip(starts, ends))]

    # panel rows are customer-major over periods 2..T
    rc = np.repeat(np.arange(n), T - 1)
    rt = np.tile(np.arange(1, T), n)
    truth = pd.DataFrame({"row_id": np.arange(len(rc)), "tau": tau[rc],
                          "propensity": p[rc], "baseline": base[rc, rt]})
    return SimulatedTables(customers, transactions, coupons, periods, truth)


def simulate(cfg: DgpConfig, category: str = "any", **panel_kwargs
             ) -> tuple[PanelDataset, GroundTruth]:
    """Simulate and encode a panel; truth refers to the any-coupon treatment."""
    tables = simulate_tables(cfg)
    data = build_panel(tables.transactions, tables.coupons, tables.customers,
                       tables.periods, category=category, categories=cfg.categories,
                       **panel_kwargs)
    truth = GroundTruth(tables.truth["tau"].to_numpy(),
                        tables.truth["propensity"].to_numpy(),
                        tables.truth["baseline"].to_numpy())
    return data, truth


def true_ate(truth: GroundTruth) -> float:
    return float(np.mean(truth.tau))


def tables_to_csv(tables: SimulatedTables) -> dict[str, str]:
    """CSV text for the three input tables and truth.csv."""
    out = {}
    for name, df in (("customers.csv", tables.customers),
                     ("transactions.csv", tables.transactions),
                     ("coupons.csv", tables.coupons),
                     ("truth.csv", tables.truth)):
        buf = io.StringIO()
        df.to_csv(buf, index=False, lineterminator="\n", float_format="%.17g")
        out[name] = buf.getvalue()
    return out
