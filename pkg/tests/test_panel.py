import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_array_equal

from robanom.panel import (
    ActivityFilterConfig,
    Panel,
    PanelError,
    apply_activity_filters,
    first_difference,
    integrate,
    load_panel,
    make_panel,
    write_panel,
)


def _wide_csv(path, values, start="2021-04-01"):
    dates = pd.date_range(start, periods=values.shape[1], freq="D")
    frame = pd.DataFrame(values.T, columns=[f"a{i}" for i in range(values.shape[0])])
    frame.insert(0, "date", dates.strftime("%Y-%m-%d"))
    frame.to_csv(path, index=False)


def test_wide_csv_shape(tmp_path):
    vals = np.arange(15, dtype=float).reshape(3, 5)
    _wide_csv(tmp_path / "p.csv", vals)
    p = load_panel(tmp_path / "p.csv")
    assert (p.d, p.n) == (3, 5)
    assert_array_equal(p.values, vals)
    assert p.series_ids == ("a0", "a1", "a2")


def test_long_layout_matches_wide(tmp_path):
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(4, 6))
    _wide_csv(tmp_path / "w.csv", vals)
    dates = pd.date_range("2021-04-01", periods=6, freq="D").strftime("%Y-%m-%d")
    rows = [(dates[t], f"a{i}", vals[i, t]) for i in range(4) for t in range(6)]
    long = pd.DataFrame(rows, columns=["date", "series_id", "value"]).sample(frac=1.0, random_state=1)
    long.to_csv(tmp_path / "l.csv", index=False)
    a, b = load_panel(tmp_path / "w.csv"), load_panel(tmp_path / "l.csv")
    assert a.series_ids == b.series_ids
    assert_array_equal(a.dates, b.dates)
    assert_array_equal(a.values, b.values)


def test_gap_in_dates_rejected(tmp_path):
    (tmp_path / "g.csv").write_text("date,a\n2021-04-05,1\n2021-04-07,2\n2021-04-08,3\n")
    with pytest.raises(PanelError, match="non-daily"):
        load_panel(tmp_path / "g.csv")


def test_missing_cells_forward_filled(tmp_path):
    (tmp_path / "m.csv").write_text("date,a,b\n2021-04-01,,1\n2021-04-02,2,\n2021-04-03,,3\n")
    p = load_panel(tmp_path / "m.csv")
    assert_array_equal(p.values, [[2, 2, 2], [1, 1, 3]])


def test_write_load_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    p = make_panel(rng.normal(size=(5, 20)) * 1e3)
    write_panel(p, tmp_path / "a.csv")
    q = load_panel(tmp_path / "a.csv")
    write_panel(q, tmp_path / "b.csv")
    assert_array_equal(q.values, p.values)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_panel_invariants():
    with pytest.raises(PanelError):
        make_panel(np.zeros((2, 3)), series_ids=["x", "x"])
    with pytest.raises(PanelError):
        Panel(np.zeros((2, 3)), ("a", "b"), np.arange(4).astype("datetime64[D]"))


def test_activity_filters():
    n = 730
    t = np.arange(n)
    busy = np.floor(t / 7.0)  # changes every 7th day: 104 changes, runs of 6
    dormant = np.concatenate([np.arange(n - 250), np.full(250, float(n - 251))])
    p = make_panel(np.vstack([np.zeros(n), busy, dormant]), series_ids=["const", "busy", "dormant"])
    kept, log = apply_activity_filters(p, ActivityFilterConfig())
    assert kept.series_ids == ("busy",)
    assert dict(log) == {"const": "min_operations", "dormant": "dormant"}
    assert_array_equal(kept.values[0], busy)


def test_first_difference_examples():
    p = make_panel(np.array([[1.0, 3.0, 2.0], [5.0, 5.0, 5.0]]))
    d = first_difference(p)
    assert d.layout == "differenced" and d.n == 2
    assert_array_equal(d.values, [[2.0, -1.0], [0.0, 0.0]])
    assert_array_equal(d.dates, p.dates[1:])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 30)), elements=st.floats(-1e6, 1e6)))
def test_difference_integrate_roundtrip(x):
    p = make_panel(x)
    back = integrate(first_difference(p), x[:, 0])
    np.testing.assert_allclose(back.values, x, rtol=0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e6, 1e6)), st.floats(-1e3, 1e3))
def test_difference_of_cumsum_is_identity(x, x0):
    levels = np.concatenate([[x0], x0 + np.cumsum(x)])
    d = first_difference(make_panel(levels)).values[0]
    np.testing.assert_allclose(d, x, rtol=1e-9, atol=1e-6)
