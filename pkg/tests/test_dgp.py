import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from robanom.dgp import (
    DgpParams,
    OutlierSpec,
    impulse_response,
    inject_outliers,
    seasonal_curve,
    signature,
    simulate_dgp,
)
from robanom.panel import make_panel


def _acf(x, lag):
    x = x - x.mean()
    return float(x[lag:] @ x[:-lag] / (x @ x))


def test_degenerate_params_give_zero_panel():
    p = DgpParams(level_scale=0, slope_scale=0, seasonal_scale=0, noise_var=0)
    assert_array_equal(simulate_dgp(p, 4, 50, 1).values, 0.0)


def test_monthly_periodicity_dominates():
    y = simulate_dgp(DgpParams(), 1, 90, 7).values[0]
    assert _acf(y, 30) > _acf(y, 13)


def test_same_seed_same_panel():
    a = simulate_dgp(DgpParams(), 5, 60, 11)
    b = simulate_dgp(DgpParams(), 5, 60, 11)
    assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, simulate_dgp(DgpParams(), 5, 60, 12).values)


def test_seasonal_is_periodic_and_hits_knots():
    t = np.linspace(0, 29.99, 400)
    s = seasonal_curve(t, 2.0, 5.0, (0.0, 14.0, 15.0, 30.0))
    assert_allclose(seasonal_curve(t + 30.0, 2.0, 5.0), s, atol=1e-12)
    assert_allclose(seasonal_curve(np.array([0.0, 14.0, 15.0, 30.0]), 2.0, 5.0), [2.0, 2.0, 5.0, 2.0], atol=1e-12)


@pytest.mark.parametrize("cp", [(0, 14, 14, 30), (0, 14, 15, 31), (0, 14, 15)])
def test_bad_control_points(cp):
    with pytest.raises(ValueError):
        DgpParams(control_points=cp)


def test_zero_delta_leaves_panel_unchanged():
    p = simulate_dgp(DgpParams(), 6, 100, 2)
    q, truth = inject_outliers(p, [OutlierSpec("AO", 80, 0.0)], 0.5)
    assert_array_equal(q.values, p.values)
    assert len(truth) == 3 and all(e.delta == 0.0 for e in truth)


def test_ao_unit_scale_single_cell():
    p = make_panel(np.zeros((2, 100)))
    q, truth = inject_outliers(p, [OutlierSpec("AO", 80, 1.5)], 0.5, scales=np.ones(2))
    expected = np.zeros((2, 100))
    expected[0, 80] = 1.5
    assert_array_equal(q.values, expected)
    assert [(e.series, e.tau, e.kind) for e in truth] == [(0, 80, "AO")]


def test_contaminated_series_are_the_first():
    p = simulate_dgp(DgpParams(), 10, 50, 0)
    _, truth = inject_outliers(p, [OutlierSpec("AO", 10, 1.0)], 0.35)
    assert [e.series for e in truth] == [0, 1, 2, 3]


def test_delta_in_sample_sd_units():
    p = simulate_dgp(DgpParams(), 3, 200, 4)
    q, truth = inject_outliers(p, [OutlierSpec("AO", 50, 2.0)], 1.0)
    sd = p.values.std(axis=1, ddof=1)
    assert_allclose(q.values[:, 50] - p.values[:, 50], 2.0 * sd)
    assert_allclose([e.delta for e in truth], 2.0 * sd)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 59), st.floats(-5, 5))
def test_lso_is_running_sum_of_ao(tau, delta):
    p = make_panel(np.zeros((1, 60)))
    ao, _ = inject_outliers(p, [OutlierSpec("AO", tau, delta)], 1.0, scales=np.ones(1))
    lso, _ = inject_outliers(p, [OutlierSpec("LSO", tau, delta)], 1.0, scales=np.ones(1))
    assert_allclose(lso.values, np.cumsum(ao.values, axis=1), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 80), st.floats(-5, 5), st.integers(0, 2**31))
def test_injection_is_additive(tau, delta, seed):
    p = simulate_dgp(DgpParams(), 4, 81, seed)
    spec = OutlierSpec("LSO", tau, delta)
    q, truth = inject_outliers(p, [spec], 0.5)
    S = np.zeros_like(p.values)
    for e in truth:
        S[e.series] += e.delta * signature(spec, p.n)
    assert_allclose(q.values - p.values, S, atol=1e-9)


def _long_division(omega, n):
    # power series of 1 / (1 - w1 L - ... - wp L^p) by synthetic division
    num = np.zeros(n)
    num[0] = 1.0
    den = np.concatenate([[1.0], -np.asarray(omega)])
    out = np.zeros(n)
    rem = num.copy()
    for k in range(n):
        out[k] = rem[k]
        rem[k : k + den.size] -= out[k] * den[: max(0, min(den.size, n - k))]
    return out


@pytest.mark.parametrize("omega", [(0.7,), (0.6, 0.3), (0.5, 0.3, 0.1)])
def test_decaying_signature_matches_long_division(omega):
    assert_allclose(impulse_response(omega, 40), _long_division(omega, 40), atol=1e-12)


def test_decaying_spec_validation():
    with pytest.raises(ValueError):
        OutlierSpec("decaying", 3, 1.0, (0.3, 0.5))
    with pytest.raises(ValueError):
        OutlierSpec("decaying", 3, 1.0, (1.2,))


def test_duplicate_truth_rejected():
    p = simulate_dgp(DgpParams(), 2, 30, 0)
    with pytest.raises(ValueError, match="duplicate"):
        inject_outliers(p, [OutlierSpec("AO", 5, 1.0), OutlierSpec("LSO", 5, 1.0)], 1.0)
