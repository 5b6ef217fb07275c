"""Least-squares DID and DDD estimators.

All fixed-effects fits use exact two-way demeaning, which requires a balanced
panel: with every unit observed in every period, subtracting unit means and
period means (and adding back the grand mean) projects out both sets of
dummies in one pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from tripled.errors import CollinearDesign, EmptyCell, RankDeficient, UnbalancedPanel
from tripled.ols import OLSResult, ols_solve
from tripled.panel import Panel
from tripled.transform import TransformedSeries, demean_ddd, demean_ddd_cov, fit_cell_regressions

__all__ = [
    "EstimateReport",
    "FixedEffectsFit",
    "SEEntry",
    "ddd_standard",
    "ddd_transformed",
    "did_group_means",
    "did_on_post",
    "did_pooled_fit",
    "did_twfe",
    "ols_solve",
    "pretrend_test",
    "report_from_fit",
    "two_way_demean",
]

SCHEMA_VERSION = "1.0"

ESTIMATOR_KINDS = ("DID_means", "DID_TWFE", "DDD_standard", "DDD_transformed", "SDID", "SDDD")


@dataclass
class FixedEffectsFit:
    """Result of a (possibly within-transformed) least-squares fit.

    ``design`` holds the regressors actually passed to the solver, i.e. the
    double-demeaned columns when ``within_transformed`` is true; ``units`` is
    row-aligned with it and is what cluster-robust variances group on.
    """

    coefficient: float
    residuals: pd.Series
    dof_resid: int
    design_meta: dict
    within_transformed: bool
    design: np.ndarray
    coefficients: np.ndarray
    target_index: int
    units: np.ndarray
    n_units: int
    n_periods: int

    @property
    def n_obs(self) -> int:
        return self.design.shape[0]

    @property
    def n_regressors(self) -> int:
        return self.design.shape[1]


@dataclass
class SEEntry:
    method: str
    se: float
    p_value: float


@dataclass
class EstimateReport:
    estimate: float
    estimator_kind: str
    n_units: int
    n_periods: int
    n_obs: int
    se_entries: list = field(default_factory=list)
    solver_diag: Optional[dict] = None

    def add_se(self, method: str, se: float, p_value: float) -> None:
        if se < 0 or not (0.0 <= p_value <= 1.0):
            raise ValueError(f"invalid standard error entry ({method}, {se}, {p_value})")
        self.se_entries.append(SEEntry(method, float(se), float(p_value)))

    def to_dict(self) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "estimator": self.estimator_kind,
            "estimate": float(self.estimate),
            "se": [{"method": e.method, "value": e.se, "p": e.p_value} for e in self.se_entries],
            "n_units": int(self.n_units),
            "n_periods": int(self.n_periods),
            "n_obs": int(self.n_obs),
        }
        if self.solver_diag is not None:
            out["solver_diag"] = self.solver_diag
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def report_from_fit(fit: FixedEffectsFit, kind: str) -> EstimateReport:
    return EstimateReport(
        estimate=fit.coefficient,
        estimator_kind=kind,
        n_units=fit.n_units,
        n_periods=fit.n_periods,
        n_obs=fit.n_obs,
    )


# -- helpers ----------------------------------------------------------------

def two_way_demean(panel: Panel, columns: np.ndarray) -> np.ndarray:
    """Remove unit and period means from row-aligned ``columns`` (n_obs x k)."""
    if not panel.is_balanced:
        raise UnbalancedPanel("fixed-effects estimation requires a balanced panel")
    cols = np.asarray(columns, dtype=np.float64)
    squeeze = cols.ndim == 1
    if squeeze:
        cols = cols[:, None]
    n, t = panel.n_units, panel.n_periods
    c3 = cols.reshape(n, t, -1)
    out = c3 - c3.mean(axis=1, keepdims=True) - c3.mean(axis=0, keepdims=True) + c3.mean(axis=(0, 1), keepdims=True)
    out = out.reshape(n * t, -1)
    return out[:, 0] if squeeze else out


def _require_cells(panel: Panel, by: list[str], expected: list[tuple]) -> None:
    f = panel.frame.assign(post=panel.post)
    present = set(map(tuple, f[by].drop_duplicates().to_numpy().tolist()))
    for cell in expected:
        if cell not in present:
            desc = ", ".join(f"{k}={v}" for k, v in zip(by, cell))
            raise EmptyCell(f"empty cell ({desc})", **dict(zip(by, map(int, cell))))


def _keyed_residuals(panel: Panel, resid: np.ndarray) -> pd.Series:
    idx = pd.MultiIndex.from_arrays([panel.column("unit"), panel.column("time")], names=["unit", "time"])
    return pd.Series(resid, index=idx, name="residual")


def _twfe(panel: Panel, regressors: dict[str, np.ndarray], target: str, meta: dict | None = None) -> FixedEffectsFit:
    names = list(regressors)
    X = two_way_demean(panel, np.column_stack([regressors[n] for n in names]))
    y = two_way_demean(panel, panel.column("outcome"))
    scale = np.abs(np.column_stack([regressors[n] for n in names])).max(axis=0)
    for j, name in enumerate(names):
        if np.all(np.abs(X[:, j]) <= 1e-12 * max(scale[j], 1.0)):
            raise CollinearDesign(
                f"regressor {name!r} has no variation after removing unit and period effects",
                column=name,
            )
    try:
        res: OLSResult = ols_solve(X, y, names=names)
    except RankDeficient as exc:
        raise CollinearDesign(f"collinear design: {exc.message}", **exc.details) from exc
    k_abs = panel.n_units + panel.n_periods - 1
    ti = names.index(target)
    return FixedEffectsFit(
        coefficient=float(res.coefficients[ti]),
        residuals=_keyed_residuals(panel, res.residuals),
        dof_resid=panel.n_obs - k_abs - len(names),
        design_meta={"regressors": names, "target": target, "n_absorbed": k_abs, **(meta or {})},
        within_transformed=True,
        design=X,
        coefficients=res.coefficients,
        target_index=ti,
        units=panel.column("unit"),
        n_units=panel.n_units,
        n_periods=panel.n_periods,
    )


def _pooled(panel: Panel, regressors: dict[str, np.ndarray], target: str, meta: dict | None = None) -> FixedEffectsFit:
    names = list(regressors)
    X = np.column_stack([regressors[n] for n in names])
    try:
        res = ols_solve(X, panel.column("outcome"), names=names)
    except RankDeficient as exc:
        raise CollinearDesign(f"collinear design: {exc.message}", **exc.details) from exc
    ti = names.index(target)
    return FixedEffectsFit(
        coefficient=float(res.coefficients[ti]),
        residuals=_keyed_residuals(panel, res.residuals),
        dof_resid=panel.n_obs - len(names),
        design_meta={"regressors": names, "target": target, "n_absorbed": 0, **(meta or {})},
        within_transformed=False,
        design=X,
        coefficients=res.coefficients,
        target_index=ti,
        units=panel.column("unit"),
        n_units=panel.n_units,
        n_periods=panel.n_periods,
    )


# -- DID --------------------------------------------------------------------

def did_group_means(panel: Panel) -> EstimateReport:
    """2x2 DID from pooled cell means of (treat, post)."""
    f = panel.frame.assign(post=panel.post)
    means = f.groupby(["treat", "post"])["outcome"].mean()
    for cell in [(1, 1), (1, 0), (0, 1), (0, 0)]:
        if cell not in means.index:
            raise EmptyCell(f"empty cell (treat={cell[0]}, post={cell[1]})", treat=cell[0], post=cell[1])
    est = (means[(1, 1)] - means[(1, 0)]) - (means[(0, 1)] - means[(0, 0)])
    return EstimateReport(
        estimate=float(est),
        estimator_kind="DID_means",
        n_units=panel.n_units,
        n_periods=panel.n_periods,
        n_obs=panel.n_obs,
    )


def did_pooled_fit(panel: Panel) -> FixedEffectsFit:
    """Pooled regression of Y on (1, Treat, Post, Treat x Post).

    Its interaction coefficient equals :func:`did_group_means`; the fit is what
    regular and clustered standard errors for the group-means DID are built on.
    """
    _require_cells(panel, ["treat", "post"], [(1, 1), (1, 0), (0, 1), (0, 0)])
    treat = panel.column("treat").astype(float)
    post = panel.post.astype(float)
    return _pooled(
        panel,
        {"const": np.ones(panel.n_obs), "treat": treat, "post": post, "treat_x_post": treat * post},
        target="treat_x_post",
    )


def did_on_post(panel: Panel) -> FixedEffectsFit:
    """Regress the (already demeaned) outcome on (1, Post) over treated units only.

    Fed with the ``Z`` transform, the Post coefficient reproduces the 2x2 DID.
    """
    treated = panel.column("treat") == 1
    sub = panel.select_rows(treated)
    post = sub.post.astype(float)
    return _pooled(sub, {"const": np.ones(sub.n_obs), "post": post}, target="post")


def did_twfe(panel: Panel) -> FixedEffectsFit:
    """Treat x Post coefficient with unit and period fixed effects."""
    if not panel.is_balanced:
        raise UnbalancedPanel("did_twfe requires a balanced panel")
    d = panel.column("treat") * panel.post
    return _twfe(panel, {"treat_x_post": d.astype(float)}, target="treat_x_post")


# -- DDD --------------------------------------------------------------------

_EIGHT_CELLS = [(j, g, p) for j in (0, 1) for g in (0, 1) for p in (0, 1)]


def ddd_standard(panel: Panel, with_covariates: bool = False) -> FixedEffectsFit:
    """Triple-difference regression with unit and period fixed effects.

    Regresses Y on Treat x Post x G, Treat x Post, Post x G (and the
    covariates when requested); returns the triple-interaction coefficient.
    """
    if not panel.is_balanced:
        raise UnbalancedPanel("ddd_standard requires a balanced panel")
    _require_cells(panel, ["treat", "group", "post"], _EIGHT_CELLS)
    treat = panel.column("treat").astype(float)
    group = panel.column("group").astype(float)
    post = panel.post.astype(float)
    regs = {
        "treat_x_post_x_group": treat * post * group,
        "treat_x_post": treat * post,
        "post_x_group": post * group,
    }
    if with_covariates:
        if not panel.covariates:
            raise CollinearDesign("with_covariates requested but the panel has no covariates")
        X = panel.covariate_matrix()
        for i, name in enumerate(panel.covariates):
            regs[name] = X[:, i]
    return _twfe(panel, regs, target="treat_x_post_x_group", meta={"with_covariates": with_covariates})


def ddd_transformed(
    panel: Panel,
    with_covariates: bool = False,
    series: TransformedSeries | None = None,
) -> FixedEffectsFit:
    """DID with unit and period effects on the demeaned outcome of ``group == 1`` units.

    ``series`` may carry a precomputed transform; otherwise ``W`` (or
    ``W_cov`` with covariates) is computed from ``panel``.
    """
    if not panel.is_balanced:
        raise UnbalancedPanel("ddd_transformed requires a balanced panel")
    if series is None:
        if with_covariates:
            series = demean_ddd_cov(panel, fit_cell_regressions(panel))
        else:
            series = demean_ddd(panel)
    sub = series.target_panel(panel)
    _require_cells(sub, ["treat", "post"], [(1, 1), (1, 0), (0, 1), (0, 0)])
    fit = did_twfe(sub)
    fit.design_meta["transform"] = series.kind
    fit.design_meta["with_covariates"] = with_covariates
    return fit


# -- pre-trend diagnostics --------------------------------------------------

def pretrend_test(panel: Panel, kind: str = "ddd") -> dict:
    """Linear trend test on the pre-period gap between cell means.

    The gap is ``mean(treat=1) - mean(treat=0)`` for ``kind="did"`` and
    ``(mean11 - mean10) - (mean01 - mean00)`` (treat, group) for ``"ddd"``.
    It is regressed on ``(1, k)`` with ``k`` the pre-period index; the slope
    is tested against zero with a t(T_pre - 2) reference.
    """
    from scipy import stats

    if kind not in ("did", "ddd"):
        raise ValueError("kind must be 'did' or 'ddd'")
    f = panel.frame[panel.post == 0]
    times = np.sort(f["time"].unique())
    if len(times) < 3:
        raise CollinearDesign("a linear pre-trend test needs at least three pre periods")
    if kind == "did":
        m = f.groupby(["treat", "time"])["outcome"].mean().unstack("time")
        gap = m.loc[1] - m.loc[0]
    else:
        m = f.groupby(["treat", "group", "time"])["outcome"].mean().unstack("time")
        gap = (m.loc[(1, 1)] - m.loc[(1, 0)]) - (m.loc[(0, 1)] - m.loc[(0, 0)])
    gap = gap.reindex(times)
    if gap.isna().any():
        raise EmptyCell("a cell is empty in some pre period")
    k = np.arange(len(times), dtype=float)
    res = ols_solve(np.column_stack([np.ones_like(k), k]), gap.to_numpy())
    dof = len(k) - 2
    s2 = float(res.residuals @ res.residuals) / dof
    se = float(np.sqrt(s2 / np.sum((k - k.mean()) ** 2)))
    slope = float(res.coefficients[1])
    p = 0.0 if se == 0.0 and slope != 0.0 else (1.0 if se == 0.0 else float(2 * stats.t.sf(abs(slope) / se, dof)))
    return {"slope": slope, "se": se, "p_value": p, "gap": gap.to_numpy()}
