"""Triple-difference estimation with transformed and synthetic variants."""

from tripled.errors import ConfigInvalid, InputError, NumericalError, TripledError
from tripled.estimators import (
    EstimateReport,
    FixedEffectsFit,
    ddd_standard,
    ddd_transformed,
    did_group_means,
    did_on_post,
    did_pooled_fit,
    did_twfe,
    pretrend_test,
)
from tripled.inference import (
    InferenceConfig,
    ResamplingResult,
    p_value,
    se_block_bootstrap,
    se_cluster,
    se_placebo,
    se_regular,
)
from tripled.ols import OLSResult, ols_solve
from tripled.panel import (
    CellKey,
    ColumnSchema,
    Panel,
    cell_mean,
    cell_means,
    filter_positive_outcome,
    load_panel,
    validate_balanced,
)
from tripled.sdid import (
    WeightSet,
    fit_weights,
    frank_wolfe_simplex,
    pre_trend_gaps,
    sddd_estimate,
    sdid_estimate,
    solve_time_weights,
    solve_unit_weights,
    synthetic_series,
)
from tripled.simgen import DgpConfig, fig1_config, generate, scenario_fig1
from tripled.transform import (
    CellRegressionSet,
    TransformedSeries,
    demean_ddd,
    demean_ddd_cov,
    demean_did,
    fit_cell_regressions,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
