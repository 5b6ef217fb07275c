"""Command-line front end: ``tripled estimate | simulate | trends``.

Errors are written to stderr as one JSON object and mapped to exit codes
0 (success), 2 (input), 3 (numerical) and 4 (configuration).
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from tripled.errors import ConfigInvalid, TripledError
from tripled.estimators import (
    EstimateReport,
    FixedEffectsFit,
    ddd_standard,
    ddd_transformed,
    did_group_means,
    did_pooled_fit,
    did_twfe,
    report_from_fit,
)
from tripled.inference import InferenceConfig, se_block_bootstrap, se_cluster, se_placebo, se_regular
from tripled.panel import ColumnSchema, Panel, filter_positive_outcome, load_panel, validate_balanced
from tripled.sdid import WeightSet, sddd_estimate, sdid_estimate, synthetic_series
from tripled.simgen import DgpConfig, fig1_config, generate
from tripled.transform import demean_ddd, demean_ddd_cov, fit_cell_regressions

logger = logging.getLogger("tripled")

METHODS = ("did", "did-twfe", "ddd", "tddd", "sdid", "sddd")
SE_METHODS = ("regular", "cluster", "placebo", "bootstrap")
FIT_METHODS = ("did", "did-twfe", "ddd", "tddd")
SYNTH_METHODS = ("sdid", "sddd")
COVARIATE_METHODS = ("ddd", "tddd", "sddd")


@dataclass
class RunConfig:
    command: str
    data_path: Optional[str] = None
    method: str = "ddd"
    covariate_columns: list = field(default_factory=list)
    se_methods: list = field(default_factory=list)
    B: int = 200
    seed: int = 0
    post_start: Optional[int] = None
    filter_positive_outcome: bool = False
    balance: str = "reject"
    schema: ColumnSchema = field(default_factory=ColumnSchema)
    output_path: Optional[str] = None
    weights_path: Optional[str] = None
    meta_path: Optional[str] = None
    scenario: str = "fig1"
    scale: int = 1
    dgp_config: Optional[DgpConfig] = None

    def validate(self) -> None:
        if self.command in ("estimate", "trends"):
            if self.method not in METHODS:
                raise ConfigInvalid(f"unknown method {self.method!r}")
            if not self.data_path:
                raise ConfigInvalid("--data is required")
            if self.post_start is None:
                raise ConfigInvalid("--post-start is required")
            if self.covariate_columns and self.method not in COVARIATE_METHODS:
                raise ConfigInvalid(f"method {self.method} does not use covariates")
        for m in self.se_methods:
            if m not in SE_METHODS:
                raise ConfigInvalid(f"unknown SE method {m!r}")
            if m in ("regular", "cluster") and self.method in SYNTH_METHODS:
                raise ConfigInvalid(f"SE method {m} is not available for {self.method}")
            if m == "placebo" and self.method not in SYNTH_METHODS:
                raise ConfigInvalid("placebo SE is only available for sdid and sddd")
        if self.B < 2:
            raise ConfigInvalid("--B must be at least 2")
        if self.balance not in ("reject", "drop_incomplete"):
            raise ConfigInvalid(f"unknown balance policy {self.balance!r}")


# -- data ---------------------------------------------------------------------

def _load(cfg: RunConfig) -> Panel:
    source = io.BytesIO(sys.stdin.buffer.read()) if cfg.data_path == "-" else cfg.data_path
    schema = ColumnSchema(**{**cfg.schema.__dict__, "covariates": tuple(cfg.covariate_columns)})
    panel = load_panel(source, schema, post_start=cfg.post_start)
    if cfg.filter_positive_outcome:
        panel, dropped = filter_positive_outcome(panel)
        logger.info("dropped %d rows with non-positive outcome", dropped)
    panel, report = validate_balanced(panel, cfg.balance)
    if report.dropped_units:
        logger.info("dropped %d incomplete units", len(report.dropped_units))
    return panel


def _emit(text: str, path: Optional[str]) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- estimation ---------------------------------------------------------------

def _fit_for(method: str, with_cov: bool) -> Callable[[Panel], FixedEffectsFit]:
    return {
        "did": did_pooled_fit,
        "did-twfe": did_twfe,
        "ddd": lambda p: ddd_standard(p, with_cov),
        "tddd": lambda p: ddd_transformed(p, with_cov),
    }[method]


def _point_estimator(method: str, with_cov: bool) -> Callable[[Panel], float]:
    if method == "did":
        return lambda p: did_group_means(p).estimate
    if method == "sdid":
        return lambda p: sdid_estimate(p)[0].estimate
    if method == "sddd":
        return lambda p: sddd_estimate(p, with_cov)[0].estimate
    fit = _fit_for(method, with_cov)
    return lambda p: fit(p).coefficient


def estimate_panel(panel: Panel, cfg: RunConfig) -> tuple[EstimateReport, Optional[WeightSet]]:
    """Point estimate plus every requested standard error."""
    with_cov = bool(cfg.covariate_columns)
    ws = None
    fit = None
    if cfg.method in FIT_METHODS:
        fit = _fit_for(cfg.method, with_cov)(panel)
        kind = {"did": "DID_means", "did-twfe": "DID_TWFE", "ddd": "DDD_standard", "tddd": "DDD_transformed"}[cfg.method]
        report = did_group_means(panel) if cfg.method == "did" else report_from_fit(fit, kind)
    elif cfg.method == "sdid":
        report, ws = sdid_estimate(panel)
    else:
        report, ws = sddd_estimate(panel, with_cov)

    for m in cfg.se_methods:
        if m == "regular":
            report.add_se("regular", *se_regular(fit))
        elif m == "cluster":
            report.add_se("cluster", *se_cluster(fit))
        elif m == "placebo":
            icfg = InferenceConfig("placebo", B=cfg.B, seed=cfg.seed, df_rule="normal")
            if cfg.method == "sddd":
                # reassign treatment among transformed target-subgroup controls
                series = demean_ddd_cov(panel, fit_cell_regressions(panel)) if with_cov else demean_ddd(panel)
                res = se_placebo(series.target_panel(panel), lambda p: sdid_estimate(p)[0].estimate, icfg, report.estimate)
            else:
                res = se_placebo(panel, _point_estimator("sdid", False), icfg, report.estimate)
            report.add_se("placebo", res.se, res.p_value)
        elif m == "bootstrap":
            icfg = InferenceConfig("block_bootstrap", B=cfg.B, seed=cfg.seed, df_rule="normal")
            res = se_block_bootstrap(panel, _point_estimator(cfg.method, with_cov), icfg, report.estimate)
            report.add_se("bootstrap", res.se, res.p_value)
    return report, ws


def run_estimate(cfg: RunConfig) -> EstimateReport:
    panel = _load(cfg)
    report, _ = estimate_panel(panel, cfg)
    _emit(report.to_json(indent=2, sort_keys=True) + "\n", cfg.output_path)
    return report


# -- simulation ---------------------------------------------------------------

def run_simulate(cfg: RunConfig) -> Panel:
    if cfg.dgp_config is not None:
        dgp = cfg.dgp_config
    elif cfg.scenario == "fig1":
        dgp = fig1_config(scale=cfg.scale, seed=cfg.seed)
    else:
        raise ConfigInvalid(f"unknown scenario {cfg.scenario!r}")
    panel = generate(dgp)
    meta = {"schema_version": "1.0", "scenario": cfg.scenario if cfg.dgp_config is None else "custom", "dgp": dgp.to_metadata()}
    meta_text = json.dumps(meta, indent=2, sort_keys=True) + "\n"
    _emit(panel.to_csv(), cfg.output_path)
    meta_path = cfg.meta_path
    if meta_path is None and cfg.output_path not in (None, "-"):
        meta_path = str(Path(cfg.output_path).with_suffix(".meta.json"))
    if meta_path is not None:
        Path(meta_path).write_text(meta_text, encoding="utf-8")
    return panel


# -- trends -------------------------------------------------------------------

def trend_series(panel: Panel, method: str = "sddd", with_cov: bool = False) -> tuple[pd.DataFrame, Optional[WeightSet]]:
    """Long ``series,time,value`` table of raw, transformed and synthetic series."""
    rows = []
    f = panel.frame
    for (j, g), cell in f.groupby(["treat", "group"], sort=True):
        for t, v in cell.groupby("time")["outcome"].mean().items():
            rows.append((f"raw_treat{j}_group{g}", int(t), float(v)))

    series = demean_ddd_cov(panel, fit_cell_regressions(panel)) if with_cov else demean_ddd(panel)
    both = pd.concat([series.values, series.complement]).rename("w").reset_index()
    attrs = panel.unit_table
    both = both.join(attrs, on="unit")
    for (j, g), cell in both.groupby(["treat", "group"], sort=True):
        for t, v in cell.groupby("time")["w"].mean().items():
            rows.append((f"w_treat{j}_group{g}", int(t), float(v)))

    ws = None
    if method in SYNTH_METHODS:
        work = series.target_panel(panel) if method == "sddd" else panel
        _, ws = sdid_estimate(work) if method == "sdid" else sddd_estimate(panel, with_cov)
        syn = synthetic_series(work, ws)
        for name in ("treated_mean", "control_mean", "synthetic_control"):
            for t, v in zip(syn["time"], syn[name]):
                rows.append((name, int(t), float(v)))
    return pd.DataFrame(rows, columns=["series", "time", "value"]), ws


def run_trends(cfg: RunConfig) -> pd.DataFrame:
    panel = _load(cfg)
    table, ws = trend_series(panel, cfg.method, bool(cfg.covariate_columns))
    _emit(table.to_csv(index=False, float_format="%.17g", lineterminator="\n"), cfg.output_path)
    if ws is not None:
        path = cfg.weights_path
        if path is None and cfg.output_path not in (None, "-"):
            path = str(Path(cfg.output_path).with_suffix(".weights.csv"))
        if path is not None:
            ws.to_csv(path)
    return table


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigInvalid(message)


def _csv_list(text: str) -> list:
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tripled", description="Triple-difference and synthetic DDD estimation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def data_args(p):
        p.add_argument("--data", help="input CSV path, or - for stdin")
        p.add_argument("--method", default="sddd", choices=METHODS)
        p.add_argument("--covariates", type=_csv_list, default=[])
        p.add_argument("--post-start", type=int)
        p.add_argument("--filter-positive-outcome", action="store_true")
        p.add_argument("--balance", default="reject", choices=("reject", "drop_incomplete"))
        p.add_argument("--unit-col", default="unit")
        p.add_argument("--time-col", default="time")
        p.add_argument("--treat-col", default="treat")
        p.add_argument("--group-col", default="group")
        p.add_argument("--outcome-col", default="outcome")
        p.add_argument("--out")

    est = sub.add_parser("estimate", help="run an estimator")
    data_args(est)
    est.add_argument("--se", type=_csv_list, default=[])
    est.add_argument("--B", type=int, default=200)
    est.add_argument("--seed", type=int, default=0)

    sim = sub.add_parser("simulate", help="write a synthetic panel")
    sim.add_argument("--scenario", default="fig1")
    sim.add_argument("--config", help="DGP metadata JSON overriding --scenario")
    sim.add_argument("--scale", type=int, default=1)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out")
    sim.add_argument("--meta")

    tr = sub.add_parser("trends", help="export per-period series and weights")
    data_args(tr)
    tr.add_argument("--weights-out")
    return parser


def config_from_args(argv: Optional[Sequence[str]] = None) -> RunConfig:
    ns = build_parser().parse_args(argv)
    cfg = RunConfig(command=ns.command, output_path=ns.out, seed=getattr(ns, "seed", 0))
    if ns.command == "simulate":
        cfg.scenario, cfg.scale, cfg.meta_path = ns.scenario, ns.scale, ns.meta
        if ns.config:
            try:
                d = json.loads(Path(ns.config).read_text(encoding="utf-8"))
            except FileNotFoundError as exc:
                raise ConfigInvalid(f"config file not found: {ns.config}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"config file is not valid JSON: {exc}") from exc
            cfg.dgp_config = DgpConfig.from_metadata(d.get("dgp", d))
        return cfg
    cfg.data_path, cfg.method, cfg.covariate_columns = ns.data, ns.method, ns.covariates
    cfg.post_start, cfg.filter_positive_outcome, cfg.balance = ns.post_start, ns.filter_positive_outcome, ns.balance
    cfg.schema = ColumnSchema(ns.unit_col, ns.time_col, ns.treat_col, ns.group_col, ns.outcome_col)
    if ns.command == "estimate":
        cfg.se_methods, cfg.B = ns.se, ns.B
    else:
        cfg.weights_path = ns.weights_out
    return cfg


def _configure_logging() -> None:
    level = os.environ.get("TRIPLED_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    try:
        cfg = config_from_args(argv)
        cfg.validate()
        {"estimate": run_estimate, "simulate": run_simulate, "trends": run_trends}[cfg.command](cfg)
    except TripledError as exc:
        sys.stderr.write(json.dumps({"schema_version": "1.0", "error": exc.to_dict()}, sort_keys=True) + "\n")
        return exc.exit_code
    except np.linalg.LinAlgError as exc:
        sys.stderr.write(json.dumps({"schema_version": "1.0", "error": {"kind": "LinAlgError", "message": str(exc)}}) + "\n")
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
