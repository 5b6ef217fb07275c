"""Outcome transforms that turn DID into a one-group comparison and DDD into DID.

``demean_did`` subtracts the control-group mean at each period. ``demean_ddd``
subtracts, for each target-subgroup unit (``group == 1``), the mean of the
non-target subgroup (``group == 0``) in the same treatment arm and period.
``demean_ddd_cov`` replaces that mean by a per-cell linear prediction fitted on
the non-target subgroup.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from tripled.errors import EmptyCell, InsufficientCell, MissingCellFit, RankDeficient
from tripled.ols import ols_solve
from tripled.panel import Panel


@dataclass(frozen=True)
class TransformedSeries:
    """A demeaned outcome keyed by ``(unit, time)``.

    Attributes
    ----------
    kind : {"Z", "W", "W_cov"}
    values : pd.Series
        Transformed outcome on the target subpopulation (treated units for
        ``Z``, ``group == 1`` units for ``W``/``W_cov``).
    complement : pd.Series
        The same subtraction applied to the complementary rows. Diagnostics
        only; estimators never consume it.
    baseline : pd.DataFrame
        One row per (treatment arm, time) describing what was subtracted.
    """

    kind: str
    values: pd.Series
    complement: pd.Series
    baseline: pd.DataFrame

    def target_panel(self, panel: Panel) -> Panel:
        """Subpanel of the target units with ``outcome`` replaced by the transform."""
        sub = panel.select_units(self.values.index.get_level_values("unit").unique())
        keys = pd.MultiIndex.from_arrays([sub.column("unit"), sub.column("time")])
        return sub.with_outcome(self.values.reindex(keys).to_numpy())

    def to_frame(self, include_complement: bool = False) -> pd.DataFrame:
        out = self.values.rename("value").reset_index()
        if include_complement:
            comp = self.complement.rename("value").reset_index()
            out = pd.concat([out.assign(role="target"), comp.assign(role="complement")], ignore_index=True)
        return out

    def to_csv(self, target=None) -> str | None:
        return self.to_frame().to_csv(target, index=False, float_format="%.17g", lineterminator="\n")


@dataclass(frozen=True)
class CellRegressionSet:
    """Per-(treatment arm, time) least-squares fits on the non-target subgroup.

    ``coefficients[(j, t)]`` is ``(intercept, beta_1, ..., beta_K)``.
    Cells that could not be fitted appear in ``errors`` instead.
    """

    covariates: tuple[str, ...]
    coefficients: dict = field(default_factory=dict)
    n_obs: dict = field(default_factory=dict)
    condition_diag: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def predict(self, arm: int, time: int, x: np.ndarray) -> np.ndarray:
        key = (int(arm), int(time))
        if key not in self.coefficients:
            reason = self.errors.get(key, "no fit")
            raise MissingCellFit(f"no cell regression for treat={arm}, time={time}: {reason}", treat=arm, time=time)
        beta = self.coefficients[key]
        x = np.atleast_2d(x)
        return beta[0] + x @ beta[1:]


def _keyed(panel: Panel, mask: np.ndarray, values: np.ndarray) -> pd.Series:
    idx = pd.MultiIndex.from_arrays(
        [panel.column("unit")[mask], panel.column("time")[mask]], names=["unit", "time"]
    )
    return pd.Series(values[mask], index=idx, name="value")


def demean_did(panel: Panel) -> TransformedSeries:
    """Subtract the period-specific control mean from every outcome."""
    f = panel.frame
    control = f[f["treat"] == 0]
    stats = control.groupby("time")["outcome"].agg(["mean", "count"])
    missing = [int(t) for t in panel.times if t not in stats.index]
    if missing:
        raise EmptyCell(f"no control units at time(s) {missing}", times=missing)
    base = stats["mean"].reindex(f["time"]).to_numpy()
    z = panel.column("outcome") - base
    treated = panel.column("treat") == 1
    baseline = pd.DataFrame(
        {
            "arm": 0,
            "time": stats.index.astype(np.int64),
            "source": "cell_mean",
            "value": stats["mean"].to_numpy(),
            "n": stats["count"].to_numpy(),
        }
    )
    return TransformedSeries("Z", _keyed(panel, treated, z), _keyed(panel, ~treated, z), baseline)


def demean_ddd(panel: Panel) -> TransformedSeries:
    """Subtract the non-target mean of the same treatment arm and period."""
    f = panel.frame
    nontarget = f[f["group"] == 0]
    stats = nontarget.groupby(["treat", "time"])["outcome"].agg(["mean", "count"])
    needed = [(j, int(t)) for j in (0, 1) for t in panel.times]
    missing = [k for k in needed if k not in stats.index]
    if missing:
        j, t = missing[0]
        raise EmptyCell(
            f"empty non-target cell treat={j}, time={t} ({len(missing)} empty in total)",
            treat=j,
            time=t,
        )
    keys = pd.MultiIndex.from_arrays([f["treat"], f["time"]])
    base = stats["mean"].reindex(keys).to_numpy()
    w = panel.column("outcome") - base
    target = panel.column("group") == 1
    baseline = pd.DataFrame(
        {
            "arm": stats.index.get_level_values("treat").astype(np.int64),
            "time": stats.index.get_level_values("time").astype(np.int64),
            "source": "cell_mean",
            "value": stats["mean"].to_numpy(),
            "n": stats["count"].to_numpy(),
        }
    )
    return TransformedSeries("W", _keyed(panel, target, w), _keyed(panel, ~target, w), baseline)


def fit_cell_regressions(panel: Panel, strict: bool = True) -> CellRegressionSet:
    """Regress the outcome on ``(1, X)`` inside every non-target (arm, time) cell.

    Each cell needs at least ``K + 2`` observations and a full-rank design.
    With ``strict=True`` the first failure raises; otherwise failures are
    recorded in ``errors`` and surface later as :class:`MissingCellFit`.
    With no covariates the fit is intercept-only and reproduces the cell mean.
    """
    k = panel.n_covariates
    f = panel.frame
    regs = CellRegressionSet(covariates=panel.covariates)
    nontarget = f[f["group"] == 0]
    for j in (0, 1):
        for t in panel.times:
            t = int(t)
            cell = nontarget[(nontarget["treat"] == j) & (nontarget["time"] == t)]
            n = len(cell)
            regs.n_obs[(j, t)] = n
            try:
                if n < k + 2:
                    raise InsufficientCell(
                        f"non-target cell treat={j}, time={t} has {n} observations; need {k + 2}",
                        treat=j,
                        time=t,
                        n_obs=n,
                    )
                X = np.column_stack([np.ones(n), cell.loc[:, list(panel.covariates)].to_numpy(dtype=np.float64)])
                try:
                    res = ols_solve(X, cell["outcome"].to_numpy(), names=["intercept", *panel.covariates])
                except RankDeficient as exc:
                    raise RankDeficient(
                        f"non-target cell treat={j}, time={t}: {exc.message}", treat=j, time=t, **exc.details
                    ) from exc
            except (InsufficientCell, RankDeficient) as exc:
                if strict:
                    raise
                regs.errors[(j, t)] = exc.message
                continue
            regs.coefficients[(j, t)] = res.coefficients
            regs.condition_diag[(j, t)] = {"rank": res.rank, "condition": res.condition}
    return regs


def demean_ddd_cov(panel: Panel, regs: CellRegressionSet) -> TransformedSeries:
    """Subtract the fitted non-target prediction ``(1, x)' beta_{j,t}`` from each outcome."""
    f = panel.frame
    X = panel.covariate_matrix()
    pred = np.empty(panel.n_obs)
    for (j, t), rows in f.groupby(["treat", "time"]).indices.items():
        pred[rows] = regs.predict(j, t, X[rows])
    w = panel.column("outcome") - pred
    target = panel.column("group") == 1
    baseline = pd.DataFrame(
        [
            {
                "arm": j,
                "time": t,
                "source": "cell_fit",
                "value": np.nan,
                "n": regs.n_obs.get((j, t), 0),
            }
            for (j, t) in sorted(regs.coefficients)
        ]
    )
    return TransformedSeries("W_cov", _keyed(panel, target, w), _keyed(panel, ~target, w), baseline)
