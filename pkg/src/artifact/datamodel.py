"""Customer x campaign-period panel construction.

Raw input is three tables: customers (socio-economic attributes, "unknown"
allowed), transactions (customer, day, amount) and coupons (customer,
category, validity window, optional redemption day).  Overlapping coupon
windows are cut into periods on which the set of valid coupons is constant;
each customer contributes one observation per period after the first, whose
covariates carry lags from the preceding period.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

UNKNOWN = "unknown"
ANY = "any"

DEFAULT_CATEGORIES = ("ready_to_eat", "groceries", "plants_flowers", "drugstore", "other")


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str  # "categorical" or "continuous"
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise ValueError(f"column {self.name}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and UNKNOWN not in self.levels:
            raise ValueError(f"column {self.name}: level set must include {UNKNOWN!r}")


SOCIO_SCHEMA = (
    ColumnSpec("age_group", "categorical",
               ("18-25", "26-35", "36-45", "46-55", "56-70", "70+", UNKNOWN)),
    ColumnSpec("family_size", "categorical", ("1", "2", "3", "4", "5+", UNKNOWN)),
    ColumnSpec("marital_status", "categorical", ("married", "unmarried", UNKNOWN)),
    ColumnSpec("dwelling", "categorical", ("rented", "owned", UNKNOWN)),
    ColumnSpec("income_group", "categorical", tuple(str(i) for i in range(1, 13)) + (UNKNOWN,)),
)


@dataclass(frozen=True)
class CouponValidity:
    coupon_category: str
    start_day: int
    end_day: int

    def __post_init__(self):
        if self.start_day < 0:
            raise ValueError("start_day must be non-negative")
        if self.end_day < self.start_day:
            raise ValueError(f"coupon window [{self.start_day}, {self.end_day}] is inverted")


class CampaignPeriod(NamedTuple):
    start_day: int
    end_day: int
    active: frozenset

    @property
    def length(self) -> int:
        return self.end_day - self.start_day + 1


def partition_campaign_periods(validities: Sequence[CouponValidity]) -> list[CampaignPeriod]:
    """Cut the covered timeline into maximal windows with a constant set of valid coupons.

    Gaps between windows become periods with an empty active set.
    """
    validities = list(validities)
    if not validities:
        raise ValueError("no campaigns")
    cuts = sorted({v.start_day for v in validities} | {v.end_day + 1 for v in validities})
    periods = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        active = frozenset(v.coupon_category for v in validities
                           if v.start_day <= lo and v.end_day >= hi - 1)
        keys = frozenset((v.coupon_category, v.start_day, v.end_day) for v in validities
                         if v.start_day <= lo and v.end_day >= hi - 1)
        periods.append((lo, hi - 1, active, keys))
    merged = []
    for lo, hi, active, keys in periods:
        if merged and merged[-1][3] == keys:
            merged[-1] = (merged[-1][0], hi, active, keys)
        else:
            merged.append((lo, hi, active, keys))
    return [CampaignPeriod(lo, hi, active) for lo, hi, active, _ in merged]


def encode_covariates(table: pd.DataFrame, schema: Sequence[ColumnSpec]):
    """One-hot encode categoricals (``unknown`` is an ordinary level), pass continuous through.

    Column order follows the schema, then each column's level order.
    """
    blocks, names = [], []
    n = len(table)
    for spec in schema:
        if spec.name not in table.columns:
            raise ValueError(f"missing column {spec.name!r}")
        col = table[spec.name]
        if spec.kind == "continuous":
            vals = pd.to_numeric(col, errors="coerce").to_numpy(dtype=float)
            if np.any(np.isnan(vals)):
                raise ValueError(f"column {spec.name!r} has missing or non-numeric values")
            blocks.append(vals[:, None])
            names.append(spec.name)
            continue
        labels = col.astype(str).to_numpy()
        lookup = {lev: j for j, lev in enumerate(spec.levels)}
        unseen = sorted(set(labels) - set(lookup))
        if unseen:
            raise ValueError(f"column {spec.name!r}: unseen level {unseen[0]!r}")
        onehot = np.zeros((n, len(spec.levels)))
        onehot[np.arange(n), [lookup[v] for v in labels]] = 1.0
        blocks.append(onehot)
        names.extend(f"{spec.name}:{lev}" for lev in spec.levels)
    matrix = np.hstack(blocks) if blocks else np.zeros((n, 0))
    return matrix, names


@dataclass(frozen=True)
class PanelObservation:
    customer_id: str
    period_id: int
    outcome: float
    treatment: int
    covariates: np.ndarray


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Columnar panel: row i is (customer_id[i], period_id[i])."""

    X: np.ndarray
    y: np.ndarray
    d: np.ndarray
    customer_id: np.ndarray
    period_id: np.ndarray
    feature_names: tuple[str, ...]
    category_registry: tuple[str, ...] = DEFAULT_CATEGORIES
    category: str = ANY
    schema: tuple[ColumnSpec, ...] = SOCIO_SCHEMA
    redeemed: np.ndarray | None = None
    diagnostics: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        n = len(self.y)
        if self.X.shape != (n, len(self.feature_names)):
            raise ValueError("covariate matrix does not match outcome/feature names")
        for name in ("d", "customer_id", "period_id"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has the wrong length")
        if not np.all((self.d == 0) | (self.d == 1)):
            raise ValueError("treatment must be 0/1")
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.y)):
            raise ValueError("missing numeric entries")
        keys = pd.MultiIndex.from_arrays([self.customer_id, self.period_id])
        if keys.has_duplicates:
            raise ValueError("duplicate (customer_id, period_id) pairs")
        for arr in (self.X, self.y, self.d, self.customer_id, self.period_id):
            arr.flags.writeable = False

    # -- sizes -----------------------------------------------------------
    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_customers(self) -> int:
        return len(np.unique(self.customer_id))

    @property
    def n_periods(self) -> int:
        return len(np.unique(self.period_id))

    @property
    def clusters(self) -> np.ndarray:
        return self.customer_id

    def observations(self) -> Iterator[PanelObservation]:
        for i in range(len(self)):
            yield PanelObservation(str(self.customer_id[i]), int(self.period_id[i]),
                                   float(self.y[i]), int(self.d[i]), self.X[i])

    # -- column access ---------------------------------------------------
    def column(self, name: str) -> np.ndarray:
        try:
            return self.X[:, self.feature_names.index(name)]
        except ValueError:
            raise KeyError(f"unknown feature {name!r}") from None

    def covariate_frame(self) -> pd.DataFrame:
        return pd.DataFrame(np.asarray(self.X), columns=list(self.feature_names))

    def block(self, prefix: str) -> tuple[list[str], np.ndarray]:
        cols = [j for j, f in enumerate(self.feature_names) if f.startswith(prefix + ":")]
        return [self.feature_names[j].split(":", 1)[1] for j in cols], self.X[:, cols]

    def categorical_labels(self, column: str) -> np.ndarray:
        levels, block = self.block(column)
        if not levels:
            raise KeyError(f"no one-hot block for {column!r}")
        return np.asarray(levels, dtype=object)[np.argmax(block, axis=1)]

    def ordinal_codes(self, column: str) -> np.ndarray:
        """Level codes with ``unknown`` as 0 and the other levels 1.. in schema order."""
        levels, block = self.block(column)
        known = [lev for lev in levels if lev != UNKNOWN]
        code_of = {lev: k + 1 for k, lev in enumerate(known)}
        code_of[UNKNOWN] = 0
        codes = np.array([code_of[lev] for lev in levels], dtype=float)
        return codes[np.argmax(block, axis=1)]

    def overlap_diagnostics(self) -> list[str]:
        issues = []
        for t in np.unique(self.period_id):
            dt = self.d[self.period_id == t]
            if dt.min() == dt.max():
                arm = "untreated" if dt[0] == 1 else "treated"
                issues.append(f"period {int(t)}: no {arm} observations")
        return issues

    def subset(self, mask) -> "PanelDataset":
        mask = np.asarray(mask, dtype=bool)
        red = None if self.redeemed is None else np.array(self.redeemed[mask])
        sub = replace(self, X=np.array(self.X[mask]), y=np.array(self.y[mask]),
                      d=np.array(self.d[mask]), customer_id=np.array(self.customer_id[mask]),
                      period_id=np.array(self.period_id[mask]), redeemed=red)
        return replace(sub, diagnostics=tuple(sub.overlap_diagnostics()))


# -- raw tables -----------------------------------------------------------

CUSTOMER_COLUMNS = ("customer_id",) + tuple(s.name for s in SOCIO_SCHEMA)
TRANSACTION_COLUMNS = ("customer_id", "day", "amount")
COUPON_COLUMNS = ("customer_id", "category", "start_day", "end_day", "redeemed_day")


def _require(df: pd.DataFrame, columns, what: str):
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ValueError(f"{what}: missing columns {missing}")


def load_tables(input_dir) -> dict[str, pd.DataFrame]:
    """Read customers.csv, transactions.csv and coupons.csv from a directory."""
    base = Path(input_dir)
    # round_trip parsing keeps %.17g floats bit-exact
    opts = {"dtype": {"customer_id": str}, "encoding": "utf-8",
            "float_precision": "round_trip"}
    customers = pd.read_csv(base / "customers.csv", keep_default_na=False, **opts)
    transactions = pd.read_csv(base / "transactions.csv", **opts)
    coupons = pd.read_csv(base / "coupons.csv", keep_default_na=True, **opts)
    _require(customers, CUSTOMER_COLUMNS, "customers.csv")
    _require(transactions, TRANSACTION_COLUMNS, "transactions.csv")
    _require(coupons, COUPON_COLUMNS[:4], "coupons.csv")
    if "redeemed_day" not in coupons.columns:
        coupons["redeemed_day"] = np.nan
    return {"customers": customers, "transactions": transactions, "coupons": coupons}


def coupon_validities(coupons: pd.DataFrame) -> list[CouponValidity]:
    windows = coupons[["category", "start_day", "end_day"]].drop_duplicates()
    windows = windows.sort_values(["start_day", "end_day", "category"])
    return [CouponValidity(str(c), int(s), int(e))
            for c, s, e in windows.itertuples(index=False)]


def _period_lookup(periods: Sequence[CampaignPeriod], days) -> np.ndarray:
    """Period index (0-based) containing each day, -1 outside the timeline."""
    starts = np.array([p.start_day for p in periods])
    ends = np.array([p.end_day for p in periods])
    days = np.asarray(days, dtype=float)
    idx = np.searchsorted(starts, days, side="right") - 1
    ok = (idx >= 0) & ~np.isnan(days)
    ok[ok] &= days[ok] <= ends[idx[ok]]
    return np.where(ok, idx, -1)


def build_panel(transactions: pd.DataFrame, coupons: pd.DataFrame,
                customers: pd.DataFrame, periods: Sequence[CampaignPeriod] | None = None,
                *, category: str = ANY,
                categories: Sequence[str] = DEFAULT_CATEGORIES,
                schema: Sequence[ColumnSpec] = SOCIO_SCHEMA,
                period_reference: bool = False) -> PanelDataset:
    """Pool customers x periods into an encoded panel.

    Outcome is spend in the period divided by its length in days.  The first
    period only supplies lags.  Customer columns beyond ``schema`` are
    passed through as continuous covariates.  Every panel period gets a
    dummy unless ``period_reference`` drops the first one.
    """
    categories = tuple(categories)
    if category != ANY and category not in categories:
        raise ValueError(f"category {category!r} not in registry {categories}")
    bad_cat = sorted(set(coupons["category"].astype(str)) - set(categories))
    if bad_cat:
        raise ValueError(f"coupon categories outside the registry: {bad_cat}")
    if periods is None:
        periods = partition_campaign_periods(coupon_validities(coupons))
    periods = list(periods)
    if len(periods) < 2:
        raise ValueError("need at least two periods to form lags")

    cust_ids = customers["customer_id"].astype(str).to_numpy()
    if len(set(cust_ids)) != len(cust_ids):
        raise ValueError("duplicate customer ids in customers table")
    cust_index = pd.Index(cust_ids)
    for name, table in (("coupons", coupons), ("transactions", transactions)):
        unknown_ids = sorted(set(table["customer_id"].astype(str)) - set(cust_ids))
        if unknown_ids:
            raise ValueError(f"{name} reference customers absent from the registry: "
                             f"{unknown_ids}")

    n_c, n_t, n_k = len(cust_ids), len(periods), len(categories)
    lengths = np.array([p.length for p in periods], dtype=float)

    # spend per customer x period
    t_idx = _period_lookup(periods, transactions["day"].to_numpy())
    c_idx = cust_index.get_indexer(transactions["customer_id"].astype(str))
    keep = t_idx >= 0
    spend = np.zeros((n_c, n_t))
    np.add.at(spend, (c_idx[keep], t_idx[keep]),
              transactions["amount"].to_numpy(dtype=float)[keep])
    per_day = spend / lengths

    # coupons received per category and redemptions per period
    received = np.zeros((n_c, n_t, n_k), dtype=bool)
    redeemed = np.zeros((n_c, n_t), dtype=bool)
    starts = np.array([p.start_day for p in periods])
    ends = np.array([p.end_day for p in periods])
    cat_pos = {c: k for k, c in enumerate(categories)}
    cc = cust_index.get_indexer(coupons["customer_id"].astype(str))
    for ci, cat, s, e in zip(cc, coupons["category"].astype(str),
                             coupons["start_day"].to_numpy(), coupons["end_day"].to_numpy()):
        overlap = (starts <= e) & (ends >= s)
        received[ci, overlap, cat_pos[cat]] = True
    r_idx = _period_lookup(periods, pd.to_numeric(coupons["redeemed_day"], errors="coerce"))
    hit = r_idx >= 0
    redeemed[cc[hit], r_idx[hit]] = True
    any_received = received.any(axis=2)

    if category == ANY:
        treat = any_received
    else:
        treat = received[:, :, cat_pos[category]]

    # static covariates
    extra = [c for c in customers.columns
             if c != "customer_id" and c not in {s.name for s in schema}]
    full_schema = tuple(schema) + tuple(ColumnSpec(c, "continuous") for c in extra)
    static, static_names = encode_covariates(customers, full_schema)

    panel_t = np.arange(1, n_t)  # 0-based period indices with a lag
    rows_c = np.repeat(np.arange(n_c), len(panel_t))
    rows_t = np.tile(panel_t, n_c)

    blocks = [static[rows_c]]
    names = list(static_names)
    dummy_periods = panel_t[1:] if period_reference else panel_t
    dummies = (rows_t[:, None] == dummy_periods[None, :]).astype(float)
    blocks.append(dummies)
    names += [f"period:{t + 1}" for t in dummy_periods]
    lag = rows_t - 1
    blocks.append(np.column_stack([per_day[rows_c, lag],
                                   any_received[rows_c, lag].astype(float),
                                   redeemed[rows_c, lag].astype(float)]))
    names += ["lag_spend", "lag_any_received", "lag_any_redeemed"]
    blocks.append(received[rows_c, lag, :].astype(float))
    names += [f"lag_received:{c}" for c in categories]
    if category != ANY:
        others = [k for k, c in enumerate(categories) if c != category]
        blocks.append(received[rows_c, rows_t][:, others].astype(float))
        names += [f"received:{categories[k]}" for k in others]

    data = PanelDataset(
        X=np.ascontiguousarray(np.hstack(blocks)),
        y=per_day[rows_c, rows_t],
        d=treat[rows_c, rows_t].astype(np.int64),
        customer_id=cust_ids[rows_c],
        period_id=(rows_t + 1).astype(np.int64),
        feature_names=tuple(names),
        category_registry=categories,
        category=category,
        schema=full_schema,
        redeemed=redeemed[rows_c, rows_t].astype(np.int64),
    )
    issues = data.overlap_diagnostics()
    for msg in issues:
        logger.warning("common support: %s", msg)
    return replace(data, diagnostics=tuple(issues))


# -- descriptives -----------------------------------------------------------

def _welch(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    diff = a.mean() - b.mean()
    va = a.var(ddof=1) / len(a) if len(a) > 1 else 0.0
    vb = b.var(ddof=1) / len(b) if len(b) > 1 else 0.0
    if va + vb == 0.0:
        return (0.0, 1.0) if diff == 0 else (float(np.sign(diff) * np.inf), 0.0)
    res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


def describe(dataset: PanelDataset, by_treatment: bool = True) -> pd.DataFrame:
    """Means overall and by arm, their difference and a Welch t-test p-value.

    The first row holds observation counts.  Undefined entries are NaN.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    variables = [("daily_expenditures", np.asarray(dataset.y))]
    variables += [(name, dataset.X[:, j]) for j, name in enumerate(dataset.feature_names)]
    treated = dataset.d == 1
    control = ~treated
    both = by_treatment and treated.any() and control.any()
    rows = [{"variable": "N", "mean_all": len(dataset),
             "mean_treated": int(treated.sum()) if by_treatment else np.nan,
             "mean_control": int(control.sum()) if by_treatment else np.nan,
             "diff": np.nan, "p_value": np.nan}]
    for name, v in variables:
        row = {"variable": name, "mean_all": v.mean(), "mean_treated": np.nan,
               "mean_control": np.nan, "diff": np.nan, "p_value": np.nan}
        if by_treatment:
            if treated.any():
                row["mean_treated"] = v[treated].mean()
            if control.any():
                row["mean_control"] = v[control].mean()
            if both:
                row["diff"] = row["mean_treated"] - row["mean_control"]
                row["p_value"] = _welch(v[treated], v[control])[1]
        rows.append(row)
    if by_treatment and dataset.redeemed is not None and treated.any():
        rows.append({"variable": "coupons_redeemed", "mean_all": np.nan,
                     "mean_treated": dataset.redeemed[treated].mean(),
                     "mean_control": np.nan, "diff": np.nan, "p_value": np.nan})
    return pd.DataFrame(rows, columns=["variable", "mean_all", "mean_treated",
                                       "mean_control", "diff", "p_value"])


def describe_csv(table: pd.DataFrame) -> str:
    return table.to_csv(index=False, float_format="%.6g", na_rep="NA", lineterminator="\n")


# -- filtering ----------------------------------------------------------------

Predicate = Callable[[pd.DataFrame], np.ndarray]


def known_socioeconomics(frame: pd.DataFrame) -> np.ndarray:
    """True for rows where no ``<column>:unknown`` indicator is set."""
    cols = [c for c in frame.columns if c.endswith(":" + UNKNOWN)]
    return (frame[cols].to_numpy() == 0).all(axis=1) if cols else np.ones(len(frame), bool)


def filter_rows(dataset: PanelDataset, predicate: Predicate | str) -> PanelDataset:
    """Keep rows satisfying a predicate over the covariates.

    ``predicate`` is either a callable taking the covariate frame or a pandas
    query string (quote feature names with backticks, e.g.
    ``"`age_group:unknown` == 0"``).
    """
    frame = dataset.covariate_frame()
    if isinstance(predicate, str):
        try:
            mask = frame.eval(predicate)
        except (pd.errors.UndefinedVariableError, KeyError, NameError) as exc:
            raise ValueError(f"predicate references undeclared features: {exc}") from None
    else:
        mask = predicate(frame)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(dataset),):
        raise ValueError("predicate must return one boolean per row")
    if not mask.any():
        raise ValueError("predicate selects zero rows")
    if mask.all():
        return dataset
    return dataset.subset(mask)
