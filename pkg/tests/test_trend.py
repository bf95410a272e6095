import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from robanom.dgp import DgpParams, OutlierSpec, inject_outliers, simulate_dgp
from robanom.panel import make_panel
from robanom.trend import (
    MONTHLY,
    WEEKLY,
    FitError,
    TrendCycleSpec,
    build_design,
    fit_panel,
    lte_fit,
    ols_fit,
)


def test_design_linear():
    assert_array_equal(build_design(3, TrendCycleSpec(1, ())), [[1, 1], [1, 2], [1, 3]])


def test_design_default_width_and_harmonics():
    spec = TrendCycleSpec()
    X = build_design(60, spec)
    assert spec.width == 7 and X.shape == (60, 7)
    assert_allclose(X[:, 3] ** 2 + X[:, 4] ** 2, 1.0)
    assert_allclose(X[:, 5], np.cos(MONTHLY * np.arange(1, 61)))
    assert spec.frequencies == (WEEKLY, MONTHLY)


def test_design_too_short():
    with pytest.raises(ValueError):
        build_design(6, TrendCycleSpec())


def test_clean_line_exact():
    t = np.arange(1, 51, dtype=float)
    fit = lte_fit(2 + 3 * t, build_design(50, TrendCycleSpec(1, ())), seed=0)
    assert_allclose(fit.coefficients, [2.0, 3.0], atol=1e-9)


def test_spikes_ignored_unlike_ols():
    n = 100
    t = np.arange(1, n + 1, dtype=float)
    y = 2 + 3 * t
    y[np.random.default_rng(0).choice(n, 20, replace=False)] += 100.0
    X = build_design(n, TrendCycleSpec(1, ()))
    fit = lte_fit(y, X, seed=1)
    assert_allclose(fit.coefficients, [2.0, 3.0], atol=1e-6)
    assert np.abs(ols_fit(y, X) - [2.0, 3.0]).max() > 1e-2


def _exhaustive_min(y, X, h):
    best = math.inf
    for S in itertools.combinations(range(y.size), h):
        S = list(S)
        b = np.linalg.lstsq(X[S], y[S], rcond=None)[0]
        r = y[S] - X[S] @ b
        best = min(best, float(r @ r))
    return best


def test_lte_matches_exhaustive_oracle_small():
    # a handful of cases here; the full 100-trial check lives in the acceptance suite
    for s in range(5):
        rng = np.random.default_rng(s)
        t = np.arange(1, 13, dtype=float)
        X = np.column_stack([np.ones(12), t])
        y = X @ rng.normal(size=2) + rng.normal(size=12)
        y[rng.choice(12, 3, replace=False)] += rng.normal(0, 10, 3)
        fit = lte_fit(y, X, 9, 500, s)
        assert fit.objective <= _exhaustive_min(y, X, 9) * 1.01


def test_fit_contract():
    rng = np.random.default_rng(5)
    X = build_design(80, TrendCycleSpec())
    y = X @ rng.normal(size=7) + rng.normal(size=80)
    fit = lte_fit(y, X, seed=2)
    assert fit.h == 60
    assert_array_equal(fit.residuals, y - X @ fit.coefficients)
    assert fit.objective == pytest.approx(np.sort(fit.residuals**2)[:60].sum(), rel=1e-12)
    assert np.all(np.diff(fit.history) <= 0)


@settings(max_examples=20, deadline=None)
@given(st.floats(-1e4, 1e4), st.integers(0, 1000))
def test_intercept_equivariance(k, seed):
    rng = np.random.default_rng(seed)
    X = build_design(60, TrendCycleSpec(1, (WEEKLY,)))
    y = X @ rng.normal(size=4) + rng.normal(size=60)
    a = lte_fit(y, X, seed=seed)
    b = lte_fit(y + k, X, seed=seed)
    assert_allclose(b.coefficients[0] - a.coefficients[0], k, atol=1e-6 * (1 + abs(k)))
    assert_allclose(b.coefficients[1:], a.coefficients[1:], atol=1e-6)
    assert_allclose(b.residuals, a.residuals, atol=1e-6)


def test_breakdown_with_huge_spikes():
    n = 200
    rng = np.random.default_rng(9)
    X = build_design(n, TrendCycleSpec(1, (MONTHLY,)))
    clean = X @ np.array([5.0, 0.1, 2.0, -1.0]) + rng.normal(size=n)
    y = clean.copy()
    y[rng.choice(n, 40, replace=False)] += 1e6
    fit = lte_fit(y, X, seed=0)
    # trimmed sum of the h smallest squared N(0,1) residuals is well below h
    assert fit.objective < fit.h


def test_csteps_never_worse():
    rng = np.random.default_rng(1)
    X = build_design(120, TrendCycleSpec())
    y = X @ rng.normal(size=7) + rng.standard_t(2, 120)
    one = lte_fit(y, X, seed=3, csteps=1)
    many = lte_fit(y, X, seed=3, csteps=20)
    assert many.objective <= one.objective + 1e-9


def test_h_too_small():
    with pytest.raises(FitError):
        lte_fit(np.arange(10.0), build_design(10, TrendCycleSpec()), h=5)


def test_fit_panel_identical_and_zero():
    y = simulate_dgp(DgpParams(), 1, 100, 3).values[0]
    pf = fit_panel(make_panel(np.vstack([y, y])), seed=4)
    assert_allclose(pf.fits[0].coefficients, pf.fits[1].coefficients, rtol=1e-8, atol=1e-8)
    assert pf.fits[0].objective == pytest.approx(pf.fits[1].objective, rel=1e-10)
    z =fit_panel(make_panel(np.zeros((2, 40))), seed=0)
    assert_array_equal(z.coefficient_matrix(), 0.0)
    assert_array_equal(z.residuals.values, 0.0)


def test_fit_panel_records_failures():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(2, 40))
    vals[1, 5] = np.nan
    p = make_panel(vals)
    pf = fit_panel(p, seed=0)
    assert list(pf.failures) == [p.series_ids[1]]
    assert np.isnan(pf.residuals.values[1]).all()
    assert np.isfinite(pf.residuals.values[0]).all()


def test_residual_keeps_injected_ao():
    clean = simulate_dgp(DgpParams(), 50, 200, 21)
    Y, truth = inject_outliers(clean, [OutlierSpec("AO", 80, 1.5)], 1.0)
    pf = fit_panel(Y, TrendCycleSpec.harmonics(MONTHLY, 5), n_subsets=200, seed=0)
    kept = pf.residuals.values[:, 80] / np.array([e.delta for e in truth])
    assert kept.mean() >= 0.8
