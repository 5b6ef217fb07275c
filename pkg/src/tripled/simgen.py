"""Synthetic panels with known treatment effects.

Outcomes follow the fixed-effects triple-difference structure

    Y_it = mu_i + lambda_t + L * (exp(g_c * k_t) + sum_f l_if * exp(r_f * k_t))
           + gamma1 * Treat_i * Post_t + gamma2 * G_i * Post_t
           + delta * Treat_i * Post_t * G_i + X_it' beta_{Treat_i, t} + eps_it

where ``k_t`` is the position of period ``t`` (0, 1, ...), ``g_c`` is the
growth rate of the unit's (treat, group) cell, ``l_if`` are mean-zero normal
unit loadings on factor curves with rates ``r_f``, ``mu_i`` is a seeded
normal draw and ``lambda_t`` is a deterministic linear function of ``k_t``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from tripled.errors import ConfigInvalid
from tripled.panel import Panel

CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))
FIG1_PERIODS = (2001, 2005, 2009, 2013, 2017, 2021)


@dataclass(frozen=True)
class DgpConfig:
    """Data-generating process parameters.

    ``growth`` maps ``(treat, group)`` to an exponential rate per period step.
    ``factor_rates`` adds unit-specific exponential components whose loadings
    are drawn from N(0, ``loading_sd**2``). ``beta_by_cell`` overrides the
    common covariate slope ``beta`` for specific ``(treat, time)`` cells.
    ``cell_sizes`` optionally overrides ``n_units_per_cell`` per cell.
    """

    n_units_per_cell: int = 10
    periods: tuple = FIG1_PERIODS
    post_start: int = 2021
    true_delta: float = 0.0
    true_gamma1: float = 0.0
    true_gamma2: float = 0.0
    growth: Mapping = field(default_factory=lambda: {c: 0.0 for c in CELLS})
    trend_level: float = 1.0
    factor_rates: tuple = ()
    loading_sd: float = 0.0
    noise_sd: float = 1.0
    unit_sd: float = 1.0
    time_slope: float = 0.5
    k_covariates: int = 0
    beta: tuple = ()
    beta_by_cell: Optional[Mapping] = None
    covariate_scale: float = 1.0
    cell_sizes: Optional[Mapping] = None
    seed: int = 0

    def validate(self) -> None:
        if self.n_units_per_cell < 1:
            raise ConfigInvalid("n_units_per_cell must be >= 1")
        if self.noise_sd < 0 or self.unit_sd < 0 or self.loading_sd < 0:
            raise ConfigInvalid("noise_sd, unit_sd and loading_sd must be non-negative")
        periods = list(self.periods)
        if len(periods) < 2 or periods != sorted(set(periods)):
            raise ConfigInvalid("periods must be a strictly increasing list of at least 2 values")
        if not (periods[0] < self.post_start <= periods[-1]):
            raise ConfigInvalid("post_start must leave at least one pre and one post period")
        if self.k_covariates < 0:
            raise ConfigInvalid("k_covariates must be >= 0")
        if self.beta and len(self.beta) != self.k_covariates:
            raise ConfigInvalid("beta length must equal k_covariates")
        for cell in CELLS:
            if cell not in self.growth:
                raise ConfigInvalid(f"growth missing cell {cell}")
        for cell, size in (self.cell_sizes or {}).items():
            if cell not in CELLS or int(size) < 1:
                raise ConfigInvalid(f"cell_sizes[{cell}] must name a (treat, group) cell with size >= 1")
        for key, vec in (self.beta_by_cell or {}).items():
            if len(vec) != self.k_covariates:
                raise ConfigInvalid(f"beta_by_cell[{key}] has wrong length")

    def slope_for(self, arm: int, time: int) -> np.ndarray:
        if self.beta_by_cell and (arm, time) in self.beta_by_cell:
            return np.asarray(self.beta_by_cell[(arm, time)], dtype=float)
        if self.beta:
            return np.asarray(self.beta, dtype=float)
        return np.ones(self.k_covariates)

    def to_metadata(self) -> dict:
        d = asdict(self)
        d["growth"] = {f"{t},{g}": v for (t, g), v in self.growth.items()}
        if self.beta_by_cell is not None:
            d["beta_by_cell"] = {f"{j},{t}": list(v) for (j, t), v in self.beta_by_cell.items()}
        if self.cell_sizes is not None:
            d["cell_sizes"] = {f"{t},{g}": int(v) for (t, g), v in self.cell_sizes.items()}
        d["periods"] = list(self.periods)
        d["factor_rates"] = list(self.factor_rates)
        d["beta"] = list(self.beta)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_metadata(), indent=2, sort_keys=True)

    @classmethod
    def from_metadata(cls, d: dict) -> "DgpConfig":
        def cells(m):
            return {tuple(int(x) for x in k.split(",")): v for k, v in m.items()}

        d = dict(d)
        if "growth" in d:
            d["growth"] = {k: float(v) for k, v in cells(d["growth"]).items()}
        if d.get("beta_by_cell") is not None:
            d["beta_by_cell"] = {k: tuple(v) for k, v in cells(d["beta_by_cell"]).items()}
        if d.get("cell_sizes") is not None:
            d["cell_sizes"] = {k: int(v) for k, v in cells(d["cell_sizes"]).items()}
        for key in ("periods", "factor_rates", "beta"):
            if key in d:
                d[key] = tuple(d[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown DGP fields: {sorted(unknown)}")
        return cls(**d)


def generate(config: DgpConfig) -> Panel:
    """Draw a balanced panel from ``config``.

    Draw order is fixed (unit effects, factor loadings, covariates, noise)
    so that an identical config reproduces the panel bit for bit.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    periods = np.asarray(config.periods, dtype=np.int64)
    T = len(periods)
    k_t = np.arange(T, dtype=float)
    post = (periods >= config.post_start).astype(float)
    lam = config.time_slope * k_t

    sizes = [int((config.cell_sizes or {}).get(c, config.n_units_per_cell)) for c in CELLS]
    unit_treat = np.repeat([c[0] for c in CELLS], sizes)
    unit_group = np.repeat([c[1] for c in CELLS], sizes)
    unit_rate = np.repeat([float(config.growth[c]) for c in CELLS], sizes)
    N = len(unit_treat)

    mu = rng.normal(0.0, config.unit_sd, size=N) if config.unit_sd > 0 else np.zeros(N)
    F = len(config.factor_rates)
    loadings = rng.normal(0.0, config.loading_sd, size=(N, F)) if config.loading_sd > 0 else np.zeros((N, F))
    curves = np.exp(np.outer(np.asarray(config.factor_rates, dtype=float), k_t))  # (F, T)
    K = config.k_covariates
    X = rng.uniform(-config.covariate_scale, config.covariate_scale, size=(N, T, K))
    eps = rng.normal(0.0, config.noise_sd, size=(N, T)) if config.noise_sd > 0 else np.zeros((N, T))

    tr, gr = unit_treat[:, None].astype(float), unit_group[:, None].astype(float)
    P = post[None, :]
    Y = (
        mu[:, None]
        + lam[None, :]
        + config.trend_level * (np.exp(unit_rate[:, None] * k_t[None, :]) + loadings @ curves)
        + config.true_gamma1 * tr * P
        + config.true_gamma2 * gr * P
        + config.true_delta * tr * gr * P
        + eps
    )
    if K:
        for j in (0, 1):
            for ti, t in enumerate(periods):
                rows = unit_treat == j
                Y[rows, ti] += X[rows, ti, :] @ config.slope_for(j, int(t))

    width = max(4, len(str(N - 1)))
    ids = np.array([f"u{i:0{width}d}" for i in range(N)])
    frame = pd.DataFrame(
        {
            "unit": np.repeat(ids, T),
            "time": np.tile(periods, N),
            "treat": np.repeat(unit_treat, T),
            "group": np.repeat(unit_group, T),
            "outcome": Y.ravel(),
        }
    )
    covs = [f"x{k + 1}" for k in range(K)]
    for k, name in enumerate(covs):
        frame[name] = X[:, :, k].ravel()
    return Panel.from_frame(frame, post_start=config.post_start, covariates=covs)


def fig1_config(
    scale: int = 1,
    seed: int = 0,
    true_delta: float = 10.0,
    noise_sd: float = 0.1,
    k_covariates: int = 0,
    trend_level: float = 0.5,
    loading_sd: float = 6.0,
    **extra,
) -> DgpConfig:
    """Preset with exponential trends that differ across all four (treat, group) cells.

    Every cell grows at its own rate, so neither the treatment nor the
    subgroup dimension has parallel pre-trends. Units also load on the four
    cell curves with dispersed mean-zero loadings, which puts the trend the
    target-subgroup controls need to match inside their convex hull.
    Any other :class:`DgpConfig` field may be overridden through ``extra``.
    """
    if scale < 1:
        raise ConfigInvalid("scale must be >= 1")
    growth = {(0, 0): 0.1, (0, 1): 0.15, (1, 0): 0.2, (1, 1): 0.3}
    cfg = DgpConfig(
        n_units_per_cell=20 * scale,
        periods=FIG1_PERIODS,
        post_start=2021,
        true_delta=true_delta,
        true_gamma1=3.0,
        true_gamma2=2.0,
        growth=growth,
        trend_level=trend_level,
        factor_rates=tuple(growth[c] for c in CELLS),
        loading_sd=loading_sd,
        noise_sd=noise_sd,
        unit_sd=1.0,
        time_slope=0.5,
        k_covariates=k_covariates,
        seed=seed,
    )
    unknown = set(extra) - set(DgpConfig.__dataclass_fields__)
    if unknown:
        raise ConfigInvalid(f"unknown DGP fields: {sorted(unknown)}")
    return replace(cfg, **extra)


def scenario_fig1(scale: int = 1, seed: int = 0, **overrides) -> Panel:
    """Panel for the non-parallel exponential-growth scenario."""
    return generate(fig1_config(scale=scale, seed=seed, **overrides))
