import numpy as np
import pandas as pd
import pytest
from scipy import stats

from tripled.errors import (
    ConfigInvalid,
    DegenerateResample,
    SingleCluster,
    TooFewControls,
    ZeroDof,
)
from tripled.estimators import FixedEffectsFit, ddd_standard, did_on_post, did_twfe
from tripled.inference import (
    InferenceConfig,
    cluster_meat,
    hc1_meat,
    p_value,
    replicate_rng,
    se_block_bootstrap,
    se_cluster,
    se_placebo,
    se_regular,
)
from tripled.sdid import sdid_estimate
from tripled.simgen import DgpConfig, generate

from conftest import frame_panel, random_panel


def _manual_fit(X, resid, units, coef=1.0, dof=None):
    X = np.asarray(X, float)
    n = X.shape[0]
    idx = pd.MultiIndex.from_arrays([np.asarray(units), np.arange(n)], names=["unit", "time"])
    return FixedEffectsFit(
        coefficient=coef,
        residuals=pd.Series(np.asarray(resid, float), index=idx),
        dof_resid=n - X.shape[1] if dof is None else dof,
        design_meta={},
        within_transformed=False,
        design=X,
        coefficients=np.full(X.shape[1], coef),
        target_index=0,
        units=np.asarray(units),
        n_units=len(set(units)),
        n_periods=1,
    )


# -- p-values -------------------------------------------------------------------

def test_p_value_reference_points():
    assert p_value(0.0, 1.0, "normal") == 1.0
    assert p_value(1.96, 1.0, "normal") == pytest.approx(0.05, abs=1e-3)
    assert p_value(37.586, 19.287, "t_dof", 100000) == pytest.approx(0.052, abs=1e-3)
    assert p_value(37.586, 19.287, "normal") == pytest.approx(0.0513, abs=1e-4)


def test_p_value_degenerate_conventions():
    assert p_value(0.0, 0.0) == 1.0
    assert p_value(2.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        p_value(1.0, -1.0)
    with pytest.raises(ZeroDof):
        p_value(1.0, 1.0, "t_dof", 0)


# -- regular ----------------------------------------------------------------------

def test_se_regular_hand_formula():
    y = [1.0, 4.0, 2.0, 6.5, 0.5, 3.0]
    recs = []
    for i, u in enumerate(("a", "b", "c")):
        recs += [(u, 1, 1, 1, y[2 * i]), (u, 2, 1, 1, y[2 * i + 1])]
    recs += [("z", 1, 0, 1, 0.0), ("z", 2, 0, 1, 0.0)]
    fit = did_on_post(frame_panel(recs, post_start=2))
    pre, post = np.array(y[0::2]), np.array(y[1::2])
    slope = post.mean() - pre.mean()
    rss = ((pre - pre.mean()) ** 2).sum() + ((post - post.mean()) ** 2).sum()
    se_hand = np.sqrt(rss / (6 - 2) / (6 * 0.25))
    se, p = se_regular(fit)
    assert fit.coefficient == pytest.approx(slope, abs=1e-12)
    assert se == pytest.approx(se_hand, abs=1e-10)
    assert p == pytest.approx(2 * stats.t.sf(abs(slope) / se_hand, 4), abs=1e-10)


def test_se_regular_zero_residuals():
    recs = [(u, t, tr, 1, float(t) + 3 * tr * (t >= 2)) for u, tr in (("a", 1), ("b", 1), ("c", 0), ("d", 0)) for t in (1, 2, 3)]
    fit = did_twfe(frame_panel(recs, post_start=2))
    se, p = se_regular(fit)
    assert se == pytest.approx(0.0, abs=1e-7) or p < 1e-10
    zero = _manual_fit(np.ones((4, 1)), np.zeros(4), ["a", "b", "c", "d"], coef=0.0)
    assert se_regular(zero) == (0.0, 1.0)
    nonzero = _manual_fit(np.ones((4, 1)), np.zeros(4), ["a", "b", "c", "d"], coef=2.0)
    assert se_regular(nonzero) == (0.0, 0.0)


def test_se_regular_zero_dof():
    recs = [("c", 1, 0, 1, 1.0), ("c", 2, 0, 1, 2.0), ("t", 1, 1, 1, 3.0), ("t", 2, 1, 1, 7.0)]
    with pytest.raises(ZeroDof):
        se_regular(did_twfe(frame_panel(recs, post_start=2)))


def test_regular_se_size_under_null():
    rejections = 0
    reps = 500
    for r in range(reps):
        cfg = DgpConfig(n_units_per_cell=15, seed=4 * 10_000 + r, noise_sd=1.0, unit_sd=1.0)
        se, p = se_regular(did_twfe(generate(cfg)))
        rejections += p < 0.05
    assert 0.02 <= rejections / reps <= 0.08


# -- cluster ----------------------------------------------------------------------

def test_cr1_singletons_match_hc1_meat():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, k = int(rng.integers(8, 40)), int(rng.integers(1, 5))
        X = rng.normal(size=(n, k))
        u = rng.normal(size=n)
        ids = np.array([f"o{i}" for i in range(n)])
        np.testing.assert_allclose(cluster_meat(X, u, ids), hc1_meat(X, u), atol=1e-10)


def test_cr1_singletons_close_to_hc1_se():
    rng = np.random.default_rng(3)
    n = 50
    X = np.column_stack([rng.normal(size=n), np.ones(n)])
    u = rng.normal(size=n)
    fit = _manual_fit(X, u, [f"o{i}" for i in range(n)])
    se, _ = se_cluster(fit)
    bread = np.linalg.inv(X.T @ X)
    hc1 = n / (n - 2) * bread @ hc1_meat(X, u) @ bread
    ratio = se / np.sqrt(hc1[0, 0])
    assert 0.9 < ratio < 1.1
    assert ratio == pytest.approx(np.sqrt((n - 1) / n * n / (n - 1)), rel=1e-10)


def test_cr1_mirrored_two_clusters_hand_value():
    fit = _manual_fit(np.ones((4, 1)), [1.0, 1.0, -1.0, -1.0], ["A", "A", "B", "B"])
    se, p = se_cluster(fit)
    # c = 2/1 * 3/3, bread 1/4, meat 2^2 + 2^2
    assert se == pytest.approx(1.0, abs=1e-12)
    assert p == pytest.approx(2 * stats.t.sf(1.0, 1), abs=1e-12)


def test_cr1_zero_residuals_and_single_cluster():
    fit = _manual_fit(np.ones((4, 1)), np.zeros(4), ["A", "A", "B", "B"])
    assert se_cluster(fit)[0] == 0.0
    with pytest.raises(SingleCluster):
        se_cluster(_manual_fit(np.ones((4, 1)), np.ones(4), ["A"] * 4))
    mapped = se_cluster(fit, cluster_of={"A": "x", "B": "y"})
    assert mapped[0] == 0.0


# -- placebo --------------------------------------------------------------------

def _sdid(p):
    return sdid_estimate(p)[0].estimate


def _one_treated_panel(n_controls, identical=False, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=4).cumsum()
    recs = [("t", t, 1, 1, base[t] + 2.0 * (t == 3)) for t in range(4)]
    for i in range(n_controls):
        path = base if identical else base + rng.normal(size=4)
        recs += [(f"c{i}", t, 0, 1, path[t]) for t in range(4)]
    return frame_panel(recs, post_start=3)


def test_placebo_identical_controls_zero_se():
    res = se_placebo(_one_treated_panel(4, identical=True), _sdid, InferenceConfig("placebo", B=20))
    assert res.se == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(res.draws)) <= 1e-12


def test_placebo_exhaustive_three_controls():
    panel = _one_treated_panel(3, seed=5)
    res = se_placebo(panel, _sdid, InferenceConfig("placebo", B=3))
    controls = panel.select_units(["c0", "c1", "c2"])
    hand = [_sdid(controls.with_treat([c])) for c in ("c0", "c1", "c2")]
    mean = sum(hand) / 3
    var = sum((h - mean) ** 2 for h in hand) / 3
    np.testing.assert_array_equal(res.draws, hand)
    assert res.se == pytest.approx(np.sqrt(var), abs=1e-12)


def test_placebo_deterministic_and_sampled():
    panel = _one_treated_panel(9, seed=2)
    cfg = InferenceConfig("placebo", B=5, seed=11)
    a = se_placebo(panel, _sdid, cfg)
    b = se_placebo(panel, _sdid, cfg)
    assert a.se == b.se and np.array_equal(a.draws, b.draws)
    assert len(a.draws) == 5
    c = se_placebo(panel, _sdid, InferenceConfig("placebo", B=5, seed=12))
    assert not np.array_equal(a.draws, c.draws)


def test_placebo_too_few_controls():
    recs = [(u, t, tr, 1, float(t)) for u, tr in (("a", 1), ("b", 1), ("c", 0)) for t in range(3)]
    with pytest.raises(TooFewControls):
        se_placebo(frame_panel(recs, post_start=2), _sdid, InferenceConfig("placebo", B=5))


# -- bootstrap ------------------------------------------------------------------

def _ddd(p):
    return ddd_standard(p).coefficient


def test_bootstrap_identical_units_zero_se():
    recs = []
    for j in (0, 1):
        for g in (0, 1):
            for i in range(3):
                recs += [(f"u{j}{g}{i}", t, j, g, t * (1 + j + g) + 5.0 * j * g * (t >= 2)) for t in range(3)]
    p = frame_panel(recs, post_start=2)
    res = se_block_bootstrap(p, _ddd, InferenceConfig("block_bootstrap", B=20))
    assert res.se == pytest.approx(0.0, abs=1e-12)
    assert res.estimate == pytest.approx(5.0)


def test_bootstrap_deterministic():
    p = random_panel(np.random.default_rng(0), effect=2.0)
    cfg = InferenceConfig("block_bootstrap", B=30, seed=5)
    a = se_block_bootstrap(p, _ddd, cfg)
    b = se_block_bootstrap(p, _ddd, cfg)
    assert a.se == b.se and np.array_equal(a.draws, b.draws)
    assert a.draws_frame().shape == (30, 2)


def test_bootstrap_failures_redrawn_and_counted():
    p = random_panel(np.random.default_rng(0))
    calls = {"n": 0}

    def flaky(panel):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise ZeroDof("synthetic failure")
        return 1.0

    res = se_block_bootstrap(p, flaky, InferenceConfig("block_bootstrap", B=10), estimate=1.0)
    assert res.n_failed == 0 and len(res.draws) == 10

    def always(panel):
        raise ZeroDof("always fails")

    with pytest.raises(DegenerateResample):
        se_block_bootstrap(p, always, InferenceConfig("block_bootstrap", B=4), estimate=0.0)


def test_bootstrap_tracks_monte_carlo_sd():
    cfg = DgpConfig(n_units_per_cell=40, seed=16, true_delta=3.0, noise_sd=1.0)
    res = se_block_bootstrap(generate(cfg), _ddd, InferenceConfig("block_bootstrap", B=200, seed=16))
    mc = [_ddd(generate(DgpConfig(n_units_per_cell=40, seed=16_000 + r, true_delta=3.0, noise_sd=1.0))) for r in range(500)]
    sd = float(np.std(mc, ddof=1))
    assert abs(res.se / sd - 1) <= 0.25


def test_bootstrap_single_unit_stratum_rejected():
    recs = [(f"u{j}{g}", t, j, g, float(t)) for j in (0, 1) for g in (0, 1) for t in range(3)]
    with pytest.raises(DegenerateResample):
        se_block_bootstrap(frame_panel(recs, post_start=2), _ddd, InferenceConfig("block_bootstrap", B=5))


# -- config and streams -----------------------------------------------------------

def test_inference_config_validation():
    with pytest.raises(ConfigInvalid):
        InferenceConfig("jackknife")
    with pytest.raises(ConfigInvalid):
        InferenceConfig("regular", cluster_level="state")
    with pytest.raises(ConfigInvalid):
        InferenceConfig("placebo", B=1)
    with pytest.raises(ConfigInvalid):
        InferenceConfig("regular", df_rule="z")


def test_replicate_streams_are_order_independent():
    forward = [replicate_rng(7, b).random() for b in range(5)]
    backward = [replicate_rng(7, b).random() for b in reversed(range(5))][::-1]
    assert forward == backward
    assert len(set(forward)) == 5
