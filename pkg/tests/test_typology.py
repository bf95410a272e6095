import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from robanom.dgp import DgpParams, OutlierSpec, inject_outliers, simulate_dgp
from robanom.distance import Event, OutlierReport
from robanom.panel import make_panel
from robanom.trend import MONTHLY, TrendCycleSpec
from robanom.typology import (
    CollinearDummy,
    TypologyConfig,
    annotate_report,
    classify,
    infer_sign,
    standardize,
    window_means,
)

UNIT = TypologyConfig(sigma="one")
SPEC = TrendCycleSpec.harmonics(MONTHLY, 5)


def test_step_is_lso():
    r = np.zeros(100)
    r[50:] = 3.0
    assert classify(r, 50, UNIT) == "LSO"


def test_spike_is_ao():
    r = np.zeros(100)
    r[50] = 5.0
    assert classify(r, 50, UNIT) == "AO"


def test_small_spike_unclassified():
    r = np.zeros(100)
    r[50] = 1.0
    assert classify(r, 50, UNIT) == "unclassified"


def test_window_means_and_boundaries():
    r = np.arange(100.0)
    sb, sa, nb, na = window_means(r, 50, 30)
    assert (sb, sa, nb, na) == (34.5, 65.5, 30, 30)
    assert window_means(r, 3, 30)[2] == 3
    assert classify(np.zeros(100), 3, UNIT) == "unclassified"
    assert classify(np.zeros(100), 96, UNIT) == "unclassified"
    with pytest.raises(ValueError):
        classify(np.zeros(10), 10)


def test_precedence_is_configurable():
    r = np.zeros(100)
    r[50:] = 3.0
    r[50] = 9.0
    assert classify(r, 50, UNIT) == "LSO"
    assert classify(r, 50, TypologyConfig(sigma="one", lso_first=False)) == "AO"


@pytest.mark.parametrize("kw", [{"window": 0}, {"multiplier": 0.0}, {"min_side": 0}, {"sigma": "sd"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TypologyConfig(**kw)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(35, 64), st.floats(-1e3, 1e3), st.sampled_from([0.0, 4.0, 8.0]))
def test_shift_and_negation(seed, tau, c, jump):
    rng = np.random.default_rng(seed)
    r = rng.normal(size=100)
    r[tau:] += jump
    typ = classify(r, tau)
    assert classify(r + c, tau) == typ
    assert classify(-r, tau) == typ


def test_standardize_median_mad():
    z = standardize(np.array([1.0, 2, 3, 4, 100]))
    assert z[2] == 0.0
    assert np.median(np.abs(z)) == pytest.approx(1 / 1.482602218505602, rel=1e-6)
    assert_allclose(standardize(np.array([5.0, 5, 5, 5, 7])), [0, 0, 0, 0, 2 / np.std([5.0, 5, 5, 5, 7])])


def _one_series(seed, kind, delta, tau=100):
    Y = simulate_dgp(DgpParams(), 1, 200, seed)
    return inject_outliers(Y, [OutlierSpec(kind, tau, delta)], 1.0)


def test_lso_sign_and_size():
    for seed in range(20):
        Y, truth = _one_series(seed, "LSO", -4.0)
        res = infer_sign(Y.values[0], SPEC, 100, "LSO", n_subsets=200, seed=seed)
        assert res.sign == "-"
        assert abs(res.delta_hat - truth[0].delta) <= 0.25 * abs(truth[0].delta)


def test_ao_sign():
    for seed in range(10):
        Y, truth = _one_series(seed, "AO", 6.0)
        res = infer_sign(Y.values[0], SPEC, 100, "AO", n_subsets=200, seed=seed)
        assert res.sign == "+"
        assert res.residuals[100] == 0.0


def test_forced_dummy_on_clean_series_is_small():
    for seed in range(10):
        y = simulate_dgp(DgpParams(), 1, 200, 50 + seed).values[0]
        sd = y.std(ddof=1)
        for kind in ("AO", "LSO"):
            res = infer_sign(y, SPEC, 100, kind, n_subsets=200, seed=seed)
            assert abs(res.delta_hat) <= 2 * sd


def test_dummy_at_boundary_is_collinear():
    y = simulate_dgp(DgpParams(), 1, 80, 0).values[0]
    with pytest.raises(CollinearDummy):
        infer_sign(y, SPEC, 0, "LSO")
    with pytest.raises(CollinearDummy):
        infer_sign(y, SPEC, 80, "AO")
    with pytest.raises(ValueError):
        infer_sign(y, SPEC, 10, "TC")


def test_annotate_report():
    r = np.zeros((2, 100))
    r[0, 50] = 6.0
    r[1, 60:] = 4.0
    r += np.random.default_rng(0).normal(scale=0.1, size=r.shape)
    P = make_panel(r, series_ids=["a", "b"])
    ev = [
        Event("a", P.dates[50], 6.0, "raw", 1.0),
        Event("b", P.dates[60], 4.0, "differenced", 1.0),
        Event("b", P.dates[0] - np.timedelta64(5, "D"), 1.0, "raw", 1.0),
    ]
    out = annotate_report(OutlierReport(ev), P)
    assert [e.typology for e in out.events] == ["AO", "LSO", "unclassified"]
    assert all(e.sign == "unknown" for e in out.events)
    signed = annotate_report(OutlierReport(ev[:2]), P, raw=P, spec=TrendCycleSpec(1, ()), n_subsets=100)
    assert [e.sign for e in signed.events] == ["+", "+"]
    assert signed.events[1].delta_hat == pytest.approx(4.0, abs=0.3)
