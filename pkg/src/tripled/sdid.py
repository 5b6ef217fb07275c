"""Synthetic-control unit/time weights and the weighted two-way FE estimator.

``sdid_estimate`` runs synthetic DID on raw outcomes or on a transformed
series; ``sddd_estimate`` is the triple-difference pipeline: demean the
target subgroup against the non-target subgroup, then run synthetic DID on
the ``group == 1`` subpanel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np
import pandas as pd

from tripled.errors import (
    EmptyCell,
    InsufficientPrePeriods,
    SolverNotConverged,
    UnbalancedPanel,
)
from tripled.estimators import EstimateReport
from tripled.ols import ols_solve
from tripled.panel import Panel
from tripled.transform import TransformedSeries, demean_ddd, demean_ddd_cov, fit_cell_regressions

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 10_000
TIME_RIDGE_FACTOR = 1e-6


# -- simplex-constrained least squares ---------------------------------------

@dataclass(frozen=True)
class SimplexQP:
    """``min_{w in simplex, w0} ||A w + w0 - b||^2 + ridge * ||w||^2``.

    With ``intercept=False`` the offset ``w0`` is fixed at zero.
    """

    A: np.ndarray
    b: np.ndarray
    ridge: float = 0.0
    intercept: bool = True

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.asarray(self.b, dtype=np.float64)
        if b.shape != (A.shape[0],):
            raise ValueError(f"A has {A.shape[0]} rows but b has shape {b.shape}")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def centered(self) -> tuple[np.ndarray, np.ndarray]:
        if self.intercept:
            return self.A - self.A.mean(axis=0), self.b - self.b.mean()
        return self.A, self.b

    def intercept_for(self, w: np.ndarray) -> float:
        return float(np.mean(self.b - self.A @ w)) if self.intercept else 0.0

    def objective(self, w: np.ndarray, w0: float | None = None) -> float:
        w = np.asarray(w, dtype=np.float64)
        if w0 is None:
            w0 = self.intercept_for(w)
        r = self.A @ w + w0 - self.b
        return float(r @ r + self.ridge * (w @ w))


def frank_wolfe_simplex(
    problem: SimplexQP,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float | None = None,
    start: np.ndarray | None = None,
) -> tuple[np.ndarray, float, dict]:
    """Away-step Frank-Wolfe with exact line search over the probability simplex.

    The intercept is profiled out by centering ``A`` and ``b``. Iteration
    stops once the Frank-Wolfe duality gap falls to ``tol`` (default
    ``max(1e-8 * initial objective, 1e-12)``). Hitting ``max_iter`` first is
    not an error here; ``diag["converged"]`` is False and the caller decides.
    Ties in the linear minimisation oracle go to the lowest index.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    Ac, bc = problem.centered()
    rho = problem.ridge
    d = problem.dim
    w = np.full(d, 1.0 / d) if start is None else np.asarray(start, dtype=np.float64).copy()
    r = Ac @ w - bc
    f0 = float(r @ r + rho * (w @ w))
    if tol is None:
        tol = max(1e-8 * f0, 1e-12)

    gap = np.inf
    it = 0
    n_away = n_drop = 0
    converged = False
    for it in range(1, max_iter + 1):
        grad = 2.0 * (Ac.T @ r + rho * w)
        s = int(np.argmin(grad))
        gw = float(grad @ w)
        gap = gw - float(grad[s])
        if gap <= tol:
            converged = True
            it -= 1
            break
        support = np.flatnonzero(w > 0.0)
        v = int(support[np.argmax(grad[support])])
        away_gap = float(grad[v]) - gw

        if gap >= away_gap:
            direction = -w.copy()
            direction[s] += 1.0
            gamma_max = 1.0
            away = False
        else:
            direction = w.copy()
            direction[v] -= 1.0
            gamma_max = w[v] / (1.0 - w[v])
            away = True

        Ad = Ac @ direction
        curv = float(Ad @ Ad + rho * (direction @ direction))
        slope = float(grad @ direction)
        if curv > 0.0:
            gamma = min(max(-slope / (2.0 * curv), 0.0), gamma_max)
        else:
            gamma = gamma_max if slope < 0.0 else 0.0

        w = w + gamma * direction
        if away:
            n_away += 1
            if gamma >= gamma_max:
                w[v] = 0.0
                n_drop += 1
        w[w < 0.0] = 0.0
        w /= w.sum()
        r = Ac @ w - bc
    else:
        grad = 2.0 * (Ac.T @ r + rho * w)
        gap = float(grad @ w - grad.min())
        converged = gap <= tol

    diag = {
        "iterations": int(it),
        "duality_gap": float(gap),
        "tol": float(tol),
        "converged": bool(converged),
        "objective": problem.objective(w),
        "initial_objective": float(f0),
        "away_steps": n_away,
        "drop_steps": n_drop,
    }
    return w, problem.intercept_for(w), diag


def _solve_or_raise(problem: SimplexQP, what: str, max_iter: int) -> tuple[np.ndarray, float, dict]:
    w, w0, diag = frank_wolfe_simplex(problem, max_iter=max_iter)
    if not diag["converged"]:
        raise SolverNotConverged(
            f"{what} weights did not converge: gap {diag['duality_gap']:.3e} > tol {diag['tol']:.3e} "
            f"after {diag['iterations']} iterations",
            gap=diag["duality_gap"],
            tol=diag["tol"],
        )
    return w, w0, diag


# -- weights ----------------------------------------------------------------

def noise_level(control_pre: np.ndarray) -> float:
    """Population standard deviation of consecutive pre-period first differences."""
    Y = np.atleast_2d(np.asarray(control_pre, dtype=np.float64))
    if Y.shape[1] < 2:
        raise InsufficientPrePeriods(f"need at least 2 pre periods, got {Y.shape[1]}")
    return float(np.std(np.diff(Y, axis=1)))


def regularization_zeta(control_pre: np.ndarray, n_treated: int, n_post: int) -> float:
    """Ridge strength for unit weights: ``(n_treated * n_post) ** 0.25 * sigma``."""
    return float((n_treated * n_post) ** 0.25 * noise_level(control_pre))


def solve_unit_weights(
    control_pre: np.ndarray,
    treated_pre_mean: np.ndarray,
    zeta: float,
    max_iter: int = DEFAULT_MAX_ITER,
) -> tuple[np.ndarray, float, dict]:
    """Simplex weights over controls matching the treated pre-period mean path.

    ``control_pre`` is (controls x pre periods). The ridge term is
    ``zeta**2 * T_pre * ||omega||^2``.
    """
    Y = np.atleast_2d(np.asarray(control_pre, dtype=np.float64))
    n_co, t_pre = Y.shape
    problem = SimplexQP(Y.T, np.asarray(treated_pre_mean, dtype=np.float64), ridge=zeta**2 * t_pre)
    return _solve_or_raise(problem, "unit", max_iter)


def solve_time_weights(
    control_pre: np.ndarray,
    control_post_mean: np.ndarray,
    sigma: float | None = None,
    max_iter: int = DEFAULT_MAX_ITER,
) -> tuple[np.ndarray, float, dict]:
    """Simplex weights over pre periods matching each control's post-period mean.

    A stabilising ridge ``(1e-6 * sigma)**2 * N_control`` keeps the solution
    unique; ``sigma`` defaults to :func:`noise_level` of ``control_pre``
    (zero with a single pre period).
    """
    Y = np.atleast_2d(np.asarray(control_pre, dtype=np.float64))
    n_co, t_pre = Y.shape
    if sigma is None:
        sigma = noise_level(Y) if t_pre >= 2 else 0.0
    rho = (TIME_RIDGE_FACTOR * sigma) ** 2 * n_co
    problem = SimplexQP(Y, np.asarray(control_post_mean, dtype=np.float64), ridge=rho)
    return _solve_or_raise(problem, "time", max_iter)


@dataclass
class WeightSet:
    unit_weights: pd.Series
    unit_intercept: float
    time_weights: pd.Series
    time_intercept: float
    zeta: float
    solver_diag: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "omega": {str(k): float(v) for k, v in self.unit_weights.items()},
            "omega0": float(self.unit_intercept),
            "lambda": {str(int(k)): float(v) for k, v in self.time_weights.items()},
            "lambda0": float(self.time_intercept),
            "zeta": float(self.zeta),
            "diag": self.solver_diag,
        }

    def to_frame(self) -> pd.DataFrame:
        units = pd.DataFrame({"kind": "omega", "key": self.unit_weights.index.astype(str), "weight": self.unit_weights.to_numpy()})
        times = pd.DataFrame({"kind": "lambda", "key": self.time_weights.index.astype(str), "weight": self.time_weights.to_numpy()})
        return pd.concat([units, times], ignore_index=True)

    def to_csv(self, target=None) -> str | None:
        return self.to_frame().to_csv(target, index=False, float_format="%.17g", lineterminator="\n")


# -- estimation -------------------------------------------------------------

@dataclass(frozen=True)
class _Layout:
    Y: np.ndarray
    units: np.ndarray
    times: np.ndarray
    treated: np.ndarray  # bool over units
    pre: np.ndarray  # bool over times


def _layout(panel: Panel) -> _Layout:
    if not panel.is_balanced:
        raise UnbalancedPanel("synthetic DID requires a balanced panel")
    treated = panel.unit_table["treat"].to_numpy() == 1
    if treated.all() or not treated.any():
        raise EmptyCell("synthetic DID needs both treated and control units")
    times = panel.times
    return _Layout(panel.outcome_matrix(), panel.units, times, treated, times < panel.post_start)


def fit_weights(panel: Panel, max_iter: int = DEFAULT_MAX_ITER) -> WeightSet:
    """Optimised unit and time weights for a (treat-flagged) balanced panel."""
    lay = _layout(panel)
    Yco, Ytr = lay.Y[~lay.treated], lay.Y[lay.treated]
    co_pre, co_post = Yco[:, lay.pre], Yco[:, ~lay.pre]
    n_tr, t_post = int(lay.treated.sum()), int((~lay.pre).sum())
    sigma = noise_level(co_pre)
    zeta = (n_tr * t_post) ** 0.25 * sigma
    omega, omega0, udiag = solve_unit_weights(co_pre, Ytr[:, lay.pre].mean(axis=0), zeta, max_iter)
    lam, lam0, tdiag = solve_time_weights(co_pre, co_post.mean(axis=1), sigma, max_iter)
    return WeightSet(
        unit_weights=pd.Series(omega, index=lay.units[~lay.treated], name="omega"),
        unit_intercept=omega0,
        time_weights=pd.Series(lam, index=lay.times[lay.pre], name="lambda"),
        time_intercept=lam0,
        zeta=float(zeta),
        solver_diag={"unit": udiag, "time": tdiag, "noise_level": sigma},
    )


def uniform_weights(panel: Panel) -> WeightSet:
    """Equal weights on every control and every pre period (pooled DID)."""
    lay = _layout(panel)
    co = lay.units[~lay.treated]
    pre_t = lay.times[lay.pre]
    return WeightSet(
        unit_weights=pd.Series(np.full(len(co), 1.0 / len(co)), index=co, name="omega"),
        unit_intercept=0.0,
        time_weights=pd.Series(np.full(len(pre_t), 1.0 / len(pre_t)), index=pre_t, name="lambda"),
        time_intercept=0.0,
        zeta=0.0,
        solver_diag={"override": "uniform"},
    )


def observation_weights(panel: Panel, weights: WeightSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit and per-period regression weights (treated 1/N_tr, post 1/T_post)."""
    lay = _layout(panel)
    a = np.empty(len(lay.units))
    a[lay.treated] = 1.0 / lay.treated.sum()
    a[~lay.treated] = weights.unit_weights.reindex(lay.units[~lay.treated]).to_numpy()
    b = np.empty(len(lay.times))
    b[~lay.pre] = 1.0 / (~lay.pre).sum()
    b[lay.pre] = weights.time_weights.reindex(lay.times[lay.pre]).to_numpy()
    if np.isnan(a).any() or np.isnan(b).any():
        raise ValueError("weight set does not cover every control unit / pre period")
    return a, b


def weighted_twfe(Y: np.ndarray, D: np.ndarray, unit_w: np.ndarray, time_w: np.ndarray) -> float:
    """Coefficient on ``D`` in the two-way FE regression with weights ``unit_w[i] * time_w[t]``.

    Product weights make the weighted projection onto unit and period dummies
    separable, so one weighted two-way demeaning pass is exact. Units and
    periods with zero weight drop out.
    """
    ku, kt = unit_w > 0, time_w > 0
    Y, D, a, b = Y[np.ix_(ku, kt)], D[np.ix_(ku, kt)], unit_w[ku], time_w[kt]
    a, b = a / a.sum(), b / b.sum()

    def demean(M):
        row = M @ b
        col = a @ M
        return M - row[:, None] - col[None, :] + a @ M @ b

    Yd, Dd = demean(Y), demean(D)
    wts = np.outer(a, b).ravel()
    res = ols_solve(Dd.ravel()[:, None], Yd.ravel(), weights=wts, names=["treat_x_post"])
    return float(res.coefficients[0])


def sdid_estimate(
    panel: Panel,
    outcome: TransformedSeries | None = None,
    weights: Union[str, WeightSet] = "optimized",
    kind: str = "SDID",
    max_iter: int = DEFAULT_MAX_ITER,
) -> tuple[EstimateReport, WeightSet]:
    """Synthetic DID on ``panel`` (or on the target subpanel of ``outcome``).

    ``weights`` is ``"optimized"``, ``"uniform"`` or an explicit
    :class:`WeightSet`. The estimate is the Treat x Post coefficient of the
    weighted two-way fixed-effects regression.
    """
    work = outcome.target_panel(panel) if outcome is not None else panel
    lay = _layout(work)
    if isinstance(weights, WeightSet):
        ws = weights
    elif weights == "optimized":
        ws = fit_weights(work, max_iter=max_iter)
    elif weights == "uniform":
        ws = uniform_weights(work)
    else:
        raise ValueError(f"unknown weights option {weights!r}")
    a, b = observation_weights(work, ws)
    D = np.outer(lay.treated, ~lay.pre).astype(float)
    est = weighted_twfe(lay.Y, D, a, b)
    diag = {
        "zeta": ws.zeta,
        "n_treated": int(lay.treated.sum()),
        "n_control": int((~lay.treated).sum()),
        "n_pre": int(lay.pre.sum()),
        "n_post": int((~lay.pre).sum()),
        **({"transform": outcome.kind} if outcome is not None else {}),
        **{k: v for k, v in ws.solver_diag.items() if k in ("unit", "time", "override")},
    }
    report = EstimateReport(
        estimate=est,
        estimator_kind=kind,
        n_units=work.n_units,
        n_periods=work.n_periods,
        n_obs=work.n_obs,
        solver_diag=diag,
    )
    return report, ws


def sddd_estimate(
    panel: Panel,
    with_covariates: bool = False,
    weights: Union[str, WeightSet] = "optimized",
    max_iter: int = DEFAULT_MAX_ITER,
) -> tuple[EstimateReport, WeightSet]:
    """Synthetic DID on the demeaned outcome of the ``group == 1`` subpanel."""
    if with_covariates:
        series = demean_ddd_cov(panel, fit_cell_regressions(panel))
    else:
        series = demean_ddd(panel)
    return sdid_estimate(panel, outcome=series, weights=weights, kind="SDDD", max_iter=max_iter)


# -- diagnostics ------------------------------------------------------------

def pre_fit_sse(control_pre: np.ndarray, treated_pre_mean: np.ndarray, omega: np.ndarray) -> float:
    """Sum over pre periods of squared gaps between the synthetic control and treated mean.

    The intercept is set to its least-squares value for the given ``omega``.
    """
    synth = np.asarray(omega) @ np.atleast_2d(control_pre)
    gap = synth - np.asarray(treated_pre_mean)
    gap = gap - gap.mean()
    return float(gap @ gap)


def pre_trend_gaps(panel: Panel, weights: WeightSet) -> dict:
    """Weighted vs. unweighted pre-period fit of the control group to the treated mean."""
    lay = _layout(panel)
    co_pre = lay.Y[~lay.treated][:, lay.pre]
    tr_pre = lay.Y[lay.treated][:, lay.pre].mean(axis=0)
    omega = weights.unit_weights.reindex(lay.units[~lay.treated]).to_numpy()
    n_co = co_pre.shape[0]
    return {
        "weighted_sse": pre_fit_sse(co_pre, tr_pre, omega),
        "unweighted_sse": pre_fit_sse(co_pre, tr_pre, np.full(n_co, 1.0 / n_co)),
    }


def synthetic_series(panel: Panel, weights: WeightSet) -> pd.DataFrame:
    """Per-period treated mean, unweighted control mean and synthetic control.

    The synthetic control includes the unit-weight intercept so pre-period
    levels are comparable with the treated mean.
    """
    lay = _layout(panel)
    Yco, Ytr = lay.Y[~lay.treated], lay.Y[lay.treated]
    omega = weights.unit_weights.reindex(lay.units[~lay.treated]).to_numpy()
    return pd.DataFrame(
        {
            "time": lay.times,
            "treated_mean": Ytr.mean(axis=0),
            "control_mean": Yco.mean(axis=0),
            "synthetic_control": omega @ Yco + weights.unit_intercept,
        }
    )
