import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tripled.errors import EmptyCell, InsufficientCell, MissingCellFit, RankDeficient
from tripled.simgen import DgpConfig, generate
from tripled.transform import demean_ddd, demean_ddd_cov, demean_did, fit_cell_regressions

from conftest import frame_panel, random_panel


def test_demean_did_subtraction():
    recs = [
        ("t", 1, 1, 1, 5.0), ("t", 2, 1, 1, 6.0),
        ("c1", 1, 0, 1, 1.0), ("c1", 2, 0, 1, 2.0),
        ("c2", 1, 0, 1, 3.0), ("c2", 2, 0, 1, 2.0),
    ]
    z = demean_did(frame_panel(recs, post_start=2))
    assert z.kind == "Z"
    assert z.values[("t", 1)] == 3.0 and z.values[("t", 2)] == 4.0
    assert set(z.values.index.get_level_values("unit")) == {"t"}


def test_demean_did_common_trend_is_zero():
    recs = []
    m = {1: 2.0, 2: 5.0, 3: -1.0}
    for u, tr in (("a", 1), ("b", 0), ("c", 0), ("d", 1)):
        for t in m:
            recs.append((u, t, tr, 1, m[t]))
    z = demean_did(frame_panel(recs, post_start=3))
    assert np.all(z.values.to_numpy() == 0.0)


def test_demean_did_control_mean_zero():
    p = generate(DgpConfig(n_units_per_cell=8, seed=11, noise_sd=1.0))
    z = demean_did(p)
    comp = z.complement.groupby(level="time").mean()
    assert np.max(np.abs(comp.to_numpy())) <= 1e-12


def test_demean_ddd_subtraction():
    recs = [
        ("a", 1, 1, 1, 10.0), ("a", 2, 1, 1, 10.0),
        ("b", 1, 1, 0, 3.0), ("b", 2, 1, 0, 3.0),
        ("c", 1, 1, 0, 5.0), ("c", 2, 1, 0, 5.0),
        ("d", 1, 0, 1, 1.0), ("d", 2, 0, 1, 1.0),
        ("e", 1, 0, 0, 1.0), ("e", 2, 0, 0, 1.0),
    ]
    w = demean_ddd(frame_panel(recs, post_start=2))
    assert w.values[("a", 1)] == 6.0
    assert w.values[("d", 2)] == 0.0
    assert set(w.values.index.get_level_values("unit")) == {"a", "d"}


def test_demean_ddd_identical_groups_zero():
    rng = np.random.default_rng(0)
    recs = []
    for j in (0, 1):
        for t in range(3):
            y = rng.normal()
            recs += [(f"g1_{j}", t, j, 1, y), (f"g0_{j}", t, j, 0, y)]
    w = demean_ddd(frame_panel(recs, post_start=2))
    assert np.all(w.values.to_numpy() == 0.0)


def test_demean_ddd_matches_two_pass_oracle():
    p = generate(DgpConfig(n_units_per_cell=6, seed=5, noise_sd=1.0))
    sums, counts = {}, {}
    for _, r in p.frame.iterrows():
        if r["group"] == 0:
            key = (r["treat"], r["time"])
            sums[key] = sums.get(key, 0.0) + r["outcome"]
            counts[key] = counts.get(key, 0) + 1
    w = demean_ddd(p)
    for _, r in p.frame[p.frame["group"] == 1].iterrows():
        key = (r["treat"], r["time"])
        assert w.values[(r["unit"], r["time"])] == pytest.approx(r["outcome"] - sums[key] / counts[key], abs=1e-12)


def test_demean_ddd_empty_cell():
    recs = [("a", 1, 1, 1, 1.0), ("a", 2, 1, 1, 1.0), ("e", 1, 0, 0, 1.0), ("e", 2, 0, 0, 1.0)]
    with pytest.raises(EmptyCell):
        demean_ddd(frame_panel(recs, post_start=2))


def _cov_panel(rows):
    return frame_panel(rows, post_start=2, covariates=("x1",))


def test_cell_regression_exact_line():
    rows = []
    for j in (0, 1):
        for t in (1, 2):
            for i, x in enumerate((0.0, 1.0, 3.0)):
                rows.append((f"n{j}{i}", t, j, 0, 1 + 2 * x if (j, t) == (0, 1) else x, x))
        rows += [(f"t{j}", 1, j, 1, 0.0, 0.0), (f"t{j}", 2, j, 1, 0.0, 0.0)]
    regs = fit_cell_regressions(_cov_panel(rows))
    np.testing.assert_allclose(regs.coefficients[(0, 1)], [1.0, 2.0], atol=1e-12)
    assert len(regs.coefficients[(0, 1)]) == 2


def test_cell_regression_constant_covariate_is_rank_deficient():
    rows = []
    for j in (0, 1):
        for t in (1, 2):
            for i in range(4):
                rows.append((f"n{j}{i}", t, j, 0, float(i), 1.0))
        rows += [(f"t{j}", 1, j, 1, 0.0, 0.0), (f"t{j}", 2, j, 1, 0.0, 0.0)]
    with pytest.raises(RankDeficient):
        fit_cell_regressions(_cov_panel(rows))
    regs = fit_cell_regressions(_cov_panel(rows), strict=False)
    assert len(regs.errors) == 4 and not regs.coefficients
    with pytest.raises(MissingCellFit):
        regs.predict(0, 1, np.array([[0.0]]))


def test_cell_regression_too_few_observations():
    rows = []
    for j in (0, 1):
        for t in (1, 2):
            rows.append((f"n{j}", t, j, 0, 1.0, float(t)))
        rows += [(f"t{j}", 1, j, 1, 0.0, 0.0), (f"t{j}", 2, j, 1, 0.0, 0.0)]
    with pytest.raises(InsufficientCell):
        fit_cell_regressions(_cov_panel(rows))


def test_cell_regression_noisy_matches_normal_equations():
    rng = np.random.default_rng(2)
    rows = []
    x = rng.uniform(-1, 1, size=50)
    y = 3 + 0.5 * x + rng.normal(0, 0.1, size=50)
    for i in range(50):
        for t in (1, 2):
            rows.append((f"n{i}", t, 0, 0, y[i], x[i]))
    for i in range(3):
        for t in (1, 2):
            rows.append((f"m{i}", t, 1, 0, rng.normal(), rng.normal()))
    rows += [("t", 1, 1, 1, 0.0, 0.0), ("t", 2, 1, 1, 0.0, 0.0)]
    regs = fit_cell_regressions(_cov_panel(rows))
    beta = regs.coefficients[(0, 1)]
    X = np.column_stack([np.ones(50), x])
    oracle = np.linalg.solve(X.T @ X, X.T @ y)
    np.testing.assert_allclose(beta, oracle, atol=1e-8)
    assert np.all(np.abs(beta - [3, 0.5]) < 0.15)


def test_cell_regression_without_covariates_is_cell_mean():
    p = random_panel(np.random.default_rng(4))
    regs = fit_cell_regressions(p)
    w_cov = demean_ddd_cov(p, regs)
    w = demean_ddd(p)
    np.testing.assert_allclose(w_cov.values.to_numpy(), w.values.to_numpy(), atol=1e-12)


def test_demean_ddd_cov_subtraction_and_oracle():
    p = generate(DgpConfig(n_units_per_cell=12, seed=9, k_covariates=2, noise_sd=1.0))
    regs = fit_cell_regressions(p)
    w = demean_ddd_cov(p, regs)
    assert w.kind == "W_cov"
    X = p.covariate_matrix()
    f = p.frame
    for i in np.flatnonzero(f["group"].to_numpy() == 1):
        j, t = int(f["treat"].iat[i]), int(f["time"].iat[i])
        b = regs.coefficients[(j, t)]
        expected = f["outcome"].iat[i] - (b[0] + X[i] @ b[1:])
        assert w.values[(f["unit"].iat[i], t)] == pytest.approx(expected, abs=1e-10)


def test_demean_ddd_cov_exact_model_gives_zero():
    rng = np.random.default_rng(8)
    rows = []
    beta = {(j, t): (rng.normal(), rng.normal()) for j in (0, 1) for t in (1, 2)}
    for j in (0, 1):
        for g, n in ((0, 5), (1, 3)):
            for i in range(n):
                for t in (1, 2):
                    x = rng.uniform(-1, 1)
                    rows.append((f"u{j}{g}{i}", t, j, g, beta[(j, t)][0] + beta[(j, t)][1] * x, x))
    p = _cov_panel(rows)
    w = demean_ddd_cov(p, fit_cell_regressions(p))
    assert np.max(np.abs(w.values.to_numpy())) < 1e-12


def test_series_export_and_target_panel():
    p = random_panel(np.random.default_rng(1))
    w = demean_ddd(p)
    sub = w.target_panel(p)
    assert sub.n_units == int((p.unit_table["group"] == 1).sum())
    text = w.to_csv()
    back = pd.read_csv(io.StringIO(text), float_precision="round_trip")
    assert list(back.columns) == ["unit", "time", "value"]
    np.testing.assert_array_equal(back["value"].to_numpy(), w.values.to_numpy())
    assert len(w.baseline) == 2 * p.n_periods


@settings(max_examples=60, deadline=None)
@given(
    sizes=st.tuples(*[st.integers(1, 5)] * 4),
    n_periods=st.integers(2, 6),
    seed=st.integers(0, 2**32 - 1),
)
def test_property_transform_identities(sizes, n_periods, seed):
    p = random_panel(np.random.default_rng(seed), n_per_cell=sizes, n_periods=n_periods)
    z = demean_did(p)
    assert np.max(np.abs(z.complement.groupby(level="time").mean().to_numpy())) <= 1e-12
    w = demean_ddd(p)
    comp = w.complement.to_frame("w").join(p.unit_table, on="unit")
    means = comp.groupby(["treat", comp.index.get_level_values("time")])["w"].mean()
    assert np.max(np.abs(means.to_numpy())) <= 1e-12
    # domain equals the target subpopulation
    assert set(w.values.index.get_level_values("unit")) == set(p.units[p.unit_table["group"].to_numpy() == 1])
