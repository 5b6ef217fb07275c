"""Standard errors and p-values.

Four variance estimators are provided: the homoskedastic OLS formula on the
within-transformed design, CR1 cluster-robust sandwich, the placebo
variance for synthetic-control estimators, and a unit-block bootstrap
stratified by (treat, group).

Randomised procedures draw replicate ``b`` from its own generator seeded by
``SeedSequence([seed, b])``; results therefore do not depend on the order in
which replicates are evaluated.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import pandas as pd
from scipy import stats

from tripled.errors import (
    ConfigInvalid,
    DegenerateResample,
    SingleCluster,
    TooFewControls,
    TripledError,
    ZeroDof,
)
from tripled.estimators import FixedEffectsFit
from tripled.panel import Panel

logger = logging.getLogger(__name__)

Estimator = Callable[[Panel], float]

METHODS = ("regular", "cluster", "placebo", "block_bootstrap")
MAX_REDRAWS = 10


@dataclass(frozen=True)
class InferenceConfig:
    method: str = "regular"
    cluster_level: str = "unit"
    B: int = 200
    seed: int = 0
    df_rule: str = "t_dof"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigInvalid(f"unknown inference method {self.method!r}")
        if self.cluster_level != "unit":
            raise ConfigInvalid("only unit-level clustering is supported")
        if self.df_rule not in ("t_dof", "normal"):
            raise ConfigInvalid(f"unknown df rule {self.df_rule!r}")
        if self.method in ("placebo", "block_bootstrap") and self.B < 2:
            raise ConfigInvalid("B must be at least 2 for resampling methods")


@dataclass
class ResamplingResult:
    """Outcome of a placebo or bootstrap run."""

    se: float
    p_value: float
    estimate: float
    draws: np.ndarray
    n_failed: int = 0
    failures: list = field(default_factory=list)

    def draws_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"replicate": np.arange(1, len(self.draws) + 1), "estimate": self.draws})


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(b)]))


def p_value(estimate: float, se: float, df_rule: str = "normal", df: int | None = None) -> float:
    """Two-sided p-value of ``estimate / se`` under t(df) or the standard normal.

    A zero standard error gives p = 1 for a zero estimate and p = 0 otherwise.
    """
    if se < 0:
        raise ValueError("se must be non-negative")
    if se == 0.0:
        return 1.0 if estimate == 0.0 else 0.0
    z = abs(estimate) / se
    if df_rule == "t_dof":
        if df is None or df <= 0:
            raise ZeroDof("t reference needs positive degrees of freedom")
        return float(min(1.0, 2.0 * stats.t.sf(z, df)))
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


# -- analytic ---------------------------------------------------------------

def _bread(X: np.ndarray) -> np.ndarray:
    return np.linalg.inv(X.T @ X)


def se_regular(fit: FixedEffectsFit) -> tuple[float, float]:
    """Homoskedastic standard error with ``RSS / dof_resid``; t(dof_resid) p-value."""
    if fit.dof_resid <= 0:
        raise ZeroDof(f"no residual degrees of freedom (dof_resid={fit.dof_resid})")
    u = fit.residuals.to_numpy()
    sigma2 = float(u @ u) / fit.dof_resid
    k = fit.target_index
    var = sigma2 * _bread(fit.design)[k, k]
    se = math.sqrt(max(var, 0.0))
    return se, p_value(fit.coefficient, se, "t_dof", fit.dof_resid)


def cluster_meat(X: np.ndarray, resid: np.ndarray, clusters: np.ndarray) -> np.ndarray:
    """``sum_g (X_g' u_g)(X_g' u_g)'`` over clusters."""
    codes, _ = pd.factorize(pd.Series(clusters), sort=True)
    scores = X * resid[:, None]
    sums = np.zeros((codes.max() + 1, X.shape[1]))
    np.add.at(sums, codes, scores)
    return sums.T @ sums


def hc1_meat(X: np.ndarray, resid: np.ndarray) -> np.ndarray:
    return X.T @ (X * (resid**2)[:, None])


def se_cluster(fit: FixedEffectsFit, cluster_of: Mapping | None = None) -> tuple[float, float]:
    """CR1 cluster-robust standard error; t(G - 1) p-value.

    ``cluster_of`` maps unit id to cluster id and defaults to clustering on
    the unit itself. K in the small-sample factor counts the columns of the
    design passed to the solver (absorbed fixed effects are not counted).
    """
    units = fit.units
    clusters = units if cluster_of is None else np.array([cluster_of[u] for u in units])
    G = len(np.unique(clusters))
    if G < 2:
        raise SingleCluster("cluster-robust variance needs at least two clusters")
    X = fit.design
    n, k = X.shape
    if n - k <= 0:
        raise ZeroDof("cluster-robust variance needs n > k")
    u = fit.residuals.to_numpy()
    bread = _bread(X)
    c = (G / (G - 1)) * ((n - 1) / (n - k))
    V = c * bread @ cluster_meat(X, u, clusters) @ bread
    j = fit.target_index
    se = math.sqrt(max(V[j, j], 0.0))
    return se, p_value(fit.coefficient, se, "t_dof", G - 1)


# -- placebo ----------------------------------------------------------------

def se_placebo(
    panel: Panel,
    estimator: Estimator,
    cfg: InferenceConfig,
    estimate: float | None = None,
) -> ResamplingResult:
    """Placebo variance: reassign treatment among controls and re-estimate.

    Each replicate draws ``N_treated`` placebo-treated units without
    replacement from the (sorted) controls and runs ``estimator`` on the
    control-only panel. When the number of distinct assignments does not
    exceed ``cfg.B`` every assignment is enumerated once instead. The
    variance uses denominator B; the p-value uses the normal reference.
    """
    table = panel.unit_table
    controls = np.sort(table.index[table["treat"] == 0].to_numpy())
    n_tr = int((table["treat"] == 1).sum())
    if len(controls) <= n_tr:
        raise TooFewControls(f"placebo needs more controls ({len(controls)}) than treated units ({n_tr})")
    if estimate is None:
        estimate = estimator(panel)
    control_panel = panel.select_units(controls)

    if math.comb(len(controls), n_tr) <= cfg.B:
        assignments = [list(c) for c in itertools.combinations(controls, n_tr)]
    else:
        assignments = []
        for b in range(cfg.B):
            idx = np.sort(replicate_rng(cfg.seed, b).choice(len(controls), size=n_tr, replace=False))
            assignments.append(list(controls[idx]))

    draws, failures = [], []
    for b, chosen in enumerate(assignments):
        try:
            draws.append(float(estimator(control_panel.with_treat(chosen))))
        except TripledError as exc:
            logger.warning("placebo replicate %d failed: %s", b, exc.message)
            failures.append({"replicate": b, "kind": exc.kind, "message": exc.message})
    _check_failures(len(failures), len(assignments), "placebo")
    draws = np.asarray(draws)
    se = float(np.sqrt(np.mean((draws - draws.mean()) ** 2)))
    return ResamplingResult(se, p_value(estimate, se, "normal"), float(estimate), draws, len(failures), failures)


# -- block bootstrap --------------------------------------------------------

def _check_failures(n_failed: int, n_total: int, what: str) -> None:
    if n_failed * 2 > n_total:
        raise DegenerateResample(f"{n_failed} of {n_total} {what} replicates failed", n_failed=n_failed)


def _resampled_panel(panel: Panel, blocks: dict, strata: list, rng: np.random.Generator) -> Panel:
    pieces = []
    serial = 0
    for members in strata:
        picks = rng.integers(0, len(members), size=len(members))
        for p in picks:
            block = blocks[members[p]].copy()
            block["unit"] = f"b{serial:07d}:{members[p]}"
            pieces.append(block)
            serial += 1
    frame = pd.concat(pieces, ignore_index=True)
    # blocks come from a validated panel and new ids sort in construction order
    return Panel(frame=frame, post_start=panel.post_start, covariates=panel.covariates)


def se_block_bootstrap(
    panel: Panel,
    estimator: Estimator,
    cfg: InferenceConfig,
    estimate: float | None = None,
) -> ResamplingResult:
    """Unit-block bootstrap stratified by (treat, group).

    Units are drawn with replacement within each stratum and keep their full
    time series. A replicate whose estimator raises is redrawn up to 10
    times before being counted as failed. The standard error is the sample
    standard deviation (denominator B - 1) of the replicate estimates.
    """
    table = panel.unit_table
    strata = [list(np.sort(g.index.to_numpy())) for _, g in table.groupby(["treat", "group"], sort=True)]
    small = [len(s) for s in strata if len(s) < 2]
    if small:
        raise DegenerateResample("every (treat, group) stratum needs at least 2 units for the bootstrap")
    if estimate is None:
        estimate = estimator(panel)
    blocks = {u: g for u, g in panel.frame.groupby("unit", sort=True)}

    draws, failures = [], []
    for b in range(cfg.B):
        rng = replicate_rng(cfg.seed, b)
        last = None
        for _ in range(MAX_REDRAWS):
            try:
                draws.append(float(estimator(_resampled_panel(panel, blocks, strata, rng))))
                break
            except TripledError as exc:
                last = exc
        else:
            logger.warning("bootstrap replicate %d failed after %d draws: %s", b, MAX_REDRAWS, last.message)
            failures.append({"replicate": b, "kind": last.kind, "message": last.message})
    _check_failures(len(failures), cfg.B, "bootstrap")
    draws = np.asarray(draws)
    se = float(np.std(draws, ddof=1)) if len(draws) > 1 else 0.0
    return ResamplingResult(se, p_value(estimate, se, "normal"), float(estimate), draws, len(failures), failures)
