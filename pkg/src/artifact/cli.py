"""Command-line pipeline: simulate, describe, evaluate, policy, robustness.

Settings come from a flat ``key = value`` file (``--config``) and may be
overridden with ``--set key=value``.  Without ``input_dir`` the panel is drawn
from the synthetic generator using the ``dgp.*`` keys.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .causalforest import cate_histogram, estimate_nuisances, fit_causal_forest
from .datamodel import (ANY, DEFAULT_CATEGORIES, UNKNOWN, PanelDataset, build_panel, describe,
                        describe_csv, filter_rows, known_socioeconomics, load_tables)
from .dgp import DgpConfig, simulate_tables, tables_to_csv, true_ate, GroundTruth
from .dr_scores import (aipw_scores, ate_table, estimate_ate,
                        robinson_ate, scores_csv)
from .gate import estimate_gates, gate_export, quartile_groups, scheme_from_labels
from .policytree import (bin_expenditures, fit_policy_tree, policy_value,
                         render_policy_tree, round_to_step)
from .regforest import ForestParams

logger = logging.getLogger("artifact")

OUTPUT_ENV = "ARTIFACT_OUTPUT_DIR"
EXIT_INPUT, EXIT_NUMERIC = 2, 3


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception, code: int):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage
        self.code = code


@dataclass
class RunConfig:
    input_dir: str = ""
    output_dir: str = ""
    category: str = "all"
    seed: int = 0
    threads: int = 1
    num_trees: int = 2000
    nuisance_trees: int = 0
    nuisance_honesty: bool = False
    subsample_fraction: float = 0.5
    mtry: int = 0
    min_node_size: int = 5
    imbalance_alpha: float = 0.05
    folds: int = 2
    clamp_low: float = 0.01
    clamp_high: float = 0.99
    period_reference: bool = False
    histogram_bin_width: float = 5.0
    policy_depth: int = 3
    policy_reward: str = "dr-score"
    policy_cost: float = 0.0
    policy_step: float = 0.25
    robustness_filter: str = "known"
    categories: str = ",".join(DEFAULT_CATEGORIES)
    dgp_n_customers: int = 1000
    dgp_n_periods: int = 5
    dgp_tau_spec: str = "constant"
    dgp_tau_scale: float = 10.0
    dgp_propensity_spec: str = "logistic"
    dgp_propensity_q: float = 0.3
    dgp_noise_sd: float = 20.0
    dgp_missing_rate: float = 0.52

    def __post_init__(self):
        if not self.output_dir:
            self.output_dir = os.environ.get(OUTPUT_ENV, "output")
        if self.policy_reward not in ("cate", "dr-score"):
            raise ValueError("policy_reward must be 'cate' or 'dr-score'")

    # keys in files use dots for the dgp group: dgp.n_customers
    @staticmethod
    def _key(name: str) -> str:
        return "dgp." + name[4:] if name.startswith("dgp_") else name

    @classmethod
    def _field(cls, key: str):
        name = "dgp_" + key[4:] if key.startswith("dgp.") else key
        for f in fields(cls):
            if f.name == name:
                return f
        raise ValueError(f"unknown config key {key!r}")

    @staticmethod
    def _parse(f, raw: str):
        raw = raw.strip()
        if f.type == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{f.name}: not a boolean: {raw!r}")
        if f.type == "int":
            return int(raw)
        if f.type == "float":
            return float(raw)
        return raw

    def update(self, pairs: dict[str, str]) -> "RunConfig":
        values = dataclasses.asdict(self)
        for key, raw in pairs.items():
            f = self._field(key)
            values[f.name] = self._parse(f, raw)
        return RunConfig(**values)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value")
            key, raw = line.split("=", 1)
            pairs[key.strip()] = raw
        return cls().update(pairs)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{self._key(f.name)} = {v}")
        return "\n".join(out) + "\n"

    # -- derived settings ----------------------------------------------
    def forest_params(self, nuisance: bool = False) -> ForestParams:
        trees = self.nuisance_trees if nuisance and self.nuisance_trees else self.num_trees
        return ForestParams(num_trees=trees, subsample_fraction=self.subsample_fraction,
                            mtry=self.mtry or None, min_leaf=self.min_node_size,
                            imbalance_alpha=self.imbalance_alpha, seed=self.seed,
                            honesty=self.nuisance_honesty if nuisance else True,
                            n_threads=self.threads)

    def category_registry(self) -> tuple[str, ...]:
        return tuple(c.strip() for c in self.categories.split(",") if c.strip())

    def dgp_config(self) -> DgpConfig:
        return DgpConfig(categories=self.category_registry(),
                         n_customers=self.dgp_n_customers, n_periods=self.dgp_n_periods,
                         tau_spec=self.dgp_tau_spec, tau_scale=self.dgp_tau_scale,
                         propensity_spec=self.dgp_propensity_spec,
                         propensity_q=self.dgp_propensity_q, noise_sd=self.dgp_noise_sd,
                         missing_rate=self.dgp_missing_rate, seed=self.seed)


# -- helpers ------------------------------------------------------------------

def _stage(name: str, code: int = EXIT_NUMERIC):
    class _Ctx:
        def __enter__(self):
            logger.info("stage %s", name)

        def __exit__(self, etype, exc, tb):
            if exc is None or isinstance(exc, StageError):
                return False
            if isinstance(exc, (ValueError, KeyError, FileNotFoundError, OSError,
                                FloatingPointError, np.linalg.LinAlgError,
                                ZeroDivisionError)):
                raise StageError(name, exc, code) from exc
            return False
    return _Ctx()


class Outputs:
    """Writes files under one directory and records their hashes."""

    def __init__(self, directory):
        self.dir = Path(directory)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StageError("output", exc, EXIT_INPUT) from exc
        self.files: dict[str, str] = {}
        self.warnings: list[str] = []

    def warn(self, message: str):
        logger.warning("%s", message)
        self.warnings.append(message)

    def write(self, name: str, text: str):
        path = self.dir / name
        path.write_text(text, encoding="utf-8", newline="\n")
        self.files[name] = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return path

    def manifest(self, command: str, cfg: RunConfig, started: float, extra=None):
        import numba
        import scipy
        doc = {
            "command": command,
            "seed": cfg.seed,
            "config": cfg.to_text(),
            "versions": {"artifact": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "pandas": pd.__version__,
                         "scipy": scipy.__version__, "numba": numba.__version__},
            "runtime_seconds": round(time.time() - started, 3),
            "files": dict(sorted(self.files.items())),
            "warnings": list(self.warnings),
        }
        if extra:
            doc.update(extra)
        # one manifest per command so evaluate and policy can share a directory
        (self.dir / f"manifest_{command}.json").write_text(
            json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        return doc


def _raw_tables(cfg: RunConfig):
    if cfg.input_dir:
        tables = load_tables(cfg.input_dir)
        return tables["customers"], tables["transactions"], tables["coupons"], None
    sim = simulate_tables(cfg.dgp_config())
    return sim.customers, sim.transactions, sim.coupons, sim


def _categories_for(cfg: RunConfig, registry) -> list[str]:
    if cfg.category == "all":
        return [ANY] + list(registry)
    return [c.strip() for c in cfg.category.split(",")]


def load_panels(cfg: RunConfig, row_filter=None) -> dict[str, PanelDataset]:
    with _stage("load", EXIT_INPUT):
        customers, transactions, coupons, sim = _raw_tables(cfg)
        registry = cfg.category_registry()
    panels = {}
    with _stage("panel", EXIT_INPUT):
        for cat in _categories_for(cfg, registry):
            data = build_panel(transactions, coupons, customers,
                               sim.periods if sim is not None else None,
                               category=cat, categories=registry,
                               period_reference=cfg.period_reference)
            if row_filter is not None:
                data = filter_rows(data, row_filter)
            panels[cat] = data
    return panels


INCOME_BROAD = {str(i): f"{i - 1 + (i % 2)}-{i + (i % 2)}" for i in range(1, 13)}
INCOME_BROAD[UNKNOWN] = UNKNOWN


def gate_schemes(data: PanelDataset):
    """The four segmentations used for GATE plots."""
    schemes = []
    by_name = {s.name: s for s in data.schema}
    for column, name in (("age_group", "age"), ("family_size", "family_size")):
        if column in by_name:
            schemes.append(scheme_from_labels(name, data.categorical_labels(column),
                                              by_name[column].levels))
    if "income_group" in by_name:
        raw = data.categorical_labels("income_group")
        broad = [INCOME_BROAD[v] for v in raw]
        order = list(dict.fromkeys(INCOME_BROAD[v] for v in by_name["income_group"].levels))
        schemes.append(scheme_from_labels("income", broad, order))
    schemes.append(quartile_groups(data.column("lag_spend"), "spend_quartile"))
    return schemes


def policy_features(data: PanelDataset, step: float):
    """Ordinal socio-economic codes, binned prior spend and rounded extra covariates."""
    cols, names = [], []
    for spec in data.schema:
        if spec.kind == "categorical":
            cols.append(data.ordinal_codes(spec.name))
        else:
            cols.append(round_to_step(data.column(spec.name), step))
        names.append(spec.name)
    cols.append(bin_expenditures(data.column("lag_spend")))
    names.append("lag_spend")
    return np.column_stack(cols), names


def _fmt(v) -> str:
    return f"{v:.6g}"


# -- pipeline stages ----------------------------------------------------------

def evaluate_panel(data: PanelDataset, cfg: RunConfig, out: Outputs, tag: str):
    """Nuisances, causal forest, histogram, ATE and GATEs for one treatment."""
    with _stage(f"nuisance[{tag}]"):
        nuis = estimate_nuisances(data.X, data.y, data.d, data.clusters,
                                  cfg.forest_params(nuisance=True), cfg.folds,
                                  (cfg.clamp_low, cfg.clamp_high))
    with _stage(f"causal_forest[{tag}]"):
        forest = fit_causal_forest(data.X, data.y, data.d, data.clusters, nuis,
                                   cfg.forest_params())
        cate = forest.predict_oob(data.X, data.clusters)
        missing = np.isnan(cate)
        if missing.any():
            cate[missing] = forest.predict(data.X[missing])
        edges, counts = cate_histogram(cate, cfg.histogram_bin_width)
        out.write(f"cate_hist_{tag}.csv", "bin_left,bin_right,count\n" + "".join(
            f"{_fmt(a)},{_fmt(b)},{c}\n" for a, b, c in zip(edges[:-1], edges[1:], counts)))
        out.write(f"cate_{tag}.csv", "row_id,customer_id,period_id,cate\n" + "".join(
            f"{i},{c},{t},{v:.17g}\n" for i, (c, t, v) in
            enumerate(zip(data.customer_id, data.period_id, cate))))
    with _stage(f"ate[{tag}]"):
        label = "ATE: Receiving any coupon" if tag == ANY else f"ATE: Receiving coupon for {tag}"
        scores = aipw_scores(data.y, data.d, nuis, data.clusters, label)
        ate = estimate_ate(scores)
        rob = robinson_ate(data.y, data.d, nuis, data.clusters, label + " (partialling-out)")
        out.write(f"scores_{tag}.csv", scores_csv(scores, data.customer_id, data.period_id))
    with _stage(f"gate[{tag}]"):
        for scheme in gate_schemes(data):
            try:
                result = estimate_gates(scores, scheme)
            except ValueError as exc:
                # one thin segment should not sink the whole run
                out.warn(f"gate[{tag}] {scheme.name} skipped: {exc}")
                continue
            out.write(f"gate_{tag}_{scheme.name}.csv", gate_export(result))
    return ate, rob, cate, scores


def run_evaluate(cfg: RunConfig, panels=None, out_dir=None) -> dict:
    started = time.time()
    panels = panels if panels is not None else load_panels(cfg)
    out = Outputs(out_dir or cfg.output_dir)
    ates, robs = [], []
    for tag, data in panels.items():
        ate, rob, _, _ = evaluate_panel(data, cfg, out, tag)
        ates.append(ate)
        robs.append(rob)
    table = ate_table(ates)
    out.write("ate_table.csv", table["csv"])
    out.write("ate_table.txt", table["text"])
    out.write("ate_robinson.csv", ate_table(robs)["csv"])
    out.manifest("evaluate", cfg, started,
                 {"n_obs": {k: len(v) for k, v in panels.items()}})
    print(table["text"], end="")
    return {"ate": ates, "robinson": robs, "outputs": out}


def _fit_settings(cfg: RunConfig) -> RunConfig:
    """Settings that determine the fitted scores; policy and I/O keys are blanked."""
    return dataclasses.replace(cfg, output_dir="-", threads=1, policy_depth=0,
                               policy_reward="dr-score", policy_cost=0.0, policy_step=0.0)


def _scores_current(out_dir: Path, cfg: RunConfig) -> bool:
    path = out_dir / "manifest_evaluate.json"
    if not path.exists():
        return False
    stored = RunConfig.from_text(json.loads(path.read_text(encoding="utf-8"))["config"])
    return _fit_settings(stored) == _fit_settings(cfg)


def _read_vector(path: Path, column: str, n: int):
    if not path.exists():
        return None
    vec = pd.read_csv(path, float_precision="round_trip")[column].to_numpy(dtype=float)
    return vec if len(vec) == n else None


def run_policy(cfg: RunConfig, panels=None, out_dir=None) -> dict:
    started = time.time()
    panels = panels if panels is not None else load_panels(cfg)
    out = Outputs(out_dir or cfg.output_dir)
    values = ["category,reward,depth,value,treated_share"]
    trees = {}
    for tag, data in panels.items():
        column = "gamma" if cfg.policy_reward == "dr-score" else "cate"
        name = "scores" if cfg.policy_reward == "dr-score" else "cate"
        reward = None
        if _scores_current(out.dir, cfg):
            reward = _read_vector(out.dir / f"{name}_{tag}.csv", column, len(data))
        if reward is None:
            _, _, cate, scores = evaluate_panel(data, cfg, out, tag)
            reward = scores.gamma if cfg.policy_reward == "dr-score" else cate
        with _stage(f"policy[{tag}]"):
            X, names = policy_features(data, cfg.policy_step)
            tree, value = fit_policy_tree(X, reward, cfg.policy_depth, cfg.policy_cost,
                                          cfg.threads)
            check = policy_value(tree.predict(X), np.asarray(reward) - cfg.policy_cost)
            if check != value:
                raise FloatingPointError("policy value does not reproduce")
            rendered = render_policy_tree(tree, names)
            out.write(f"policy_{tag}.json", tree.to_json(names) + "\n")
            out.write(f"policy_{tag}.dot", rendered["dot"])
            out.write(f"policy_{tag}.txt", rendered["rules"])
            values.append(f"{tag},{cfg.policy_reward},{tree.depth},{_fmt(value)},"
                          f"{_fmt(tree.predict(X).mean())}")
            trees[tag] = (tree, value, names)
    out.write("policy_values.csv", "\n".join(values) + "\n")
    out.manifest("policy", cfg, started)
    for tag, (tree, value, names) in trees.items():
        print(f"[{tag}] value {value:.6g}")
        print(render_policy_tree(tree, names)["rules"], end="")
    return {"trees": trees, "outputs": out}


def resolve_filter(spec: str):
    if spec in ("known", "drop-unknown"):
        return known_socioeconomics
    if spec in ("all", "none", ""):
        return lambda frame: np.ones(len(frame), dtype=bool)
    return spec


def robustness_dir(cfg: RunConfig) -> Path:
    base = Path(cfg.output_dir)
    return base.with_name(base.name + "_robustness")


def run_robustness(cfg: RunConfig) -> dict:
    panels = load_panels(cfg, row_filter=resolve_filter(cfg.robustness_filter))
    target = robustness_dir(cfg)
    ev = run_evaluate(cfg, panels, target)
    pol = run_policy(cfg, panels, target)
    return {"evaluate": ev, "policy": pol, "dir": target}


def run_simulate(cfg: RunConfig) -> dict:
    started = time.time()
    with _stage("simulate", EXIT_INPUT):
        sim = simulate_tables(cfg.dgp_config())
    out = Outputs(cfg.output_dir)
    for name, text in tables_to_csv(sim).items():
        out.write(name, text)
    truth = GroundTruth(sim.truth["tau"].to_numpy(), sim.truth["propensity"].to_numpy(),
                        sim.truth["baseline"].to_numpy())
    out.manifest("simulate", cfg, started)
    print(f"customers {len(sim.customers)}  periods {len(sim.periods)}  "
          f"panel rows {len(sim.truth)}  coupons {len(sim.coupons)}  "
          f"transactions {len(sim.transactions)}")
    print(f"true ATE {true_ate(truth):.6g}")
    return {"tables": sim, "truth": truth, "outputs": out}


def run_describe(cfg: RunConfig) -> dict:
    started = time.time()
    panels = load_panels(cfg)
    out = Outputs(cfg.output_dir)
    tables = {}
    for tag, data in panels.items():
        table = describe(data)
        out.write(f"describe_{tag}.csv", describe_csv(table))
        tables[tag] = table
    out.manifest("describe", cfg, started)
    first = next(iter(tables.values()))
    print(first.head(12).to_string(index=False))
    return {"tables": tables, "outputs": out}


COMMANDS = {"simulate": run_simulate, "describe": run_describe, "evaluate": run_evaluate,
            "policy": run_policy, "robustness": run_robustness}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artifact", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    parser.add_argument("--input-dir")
    parser.add_argument("--output-dir")
    parser.add_argument("--category")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--depth", type=int, dest="policy_depth")
    parser.add_argument("--reward", choices=("cate", "dr-score"), dest="policy_reward")
    parser.add_argument("--cost", type=float, dest="policy_cost")
    parser.add_argument("--filter", dest="robustness_filter",
                        help="'known' (default), 'all', or a pandas query over features")
    parser.add_argument("--write-config", metavar="PATH",
                        help="save the effective settings to PATH")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = RunConfig.from_text(Path(args.config).read_text(encoding="utf-8"))
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    for name in ("input_dir", "output_dir", "category", "seed", "threads", "policy_depth",
                 "policy_reward", "policy_cost", "robustness_filter"):
        value = getattr(args, name)
        if value is not None:
            pairs[name] = str(value)
    return cfg.update(pairs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.write_config:
            Path(args.write_config).write_text(cfg.to_text(), encoding="utf-8")
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        COMMANDS[args.command](cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
