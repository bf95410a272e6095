"""Structural time-series simulator and outlier injection.

Each series is a local linear trend plus a 30-day periodic cubic seasonal
plus Gaussian noise.  Outliers are added as sparse signatures
``delta * psi(L) I_t(tau)`` where ``psi`` is the impulse response of the
outlier polynomial (AO: 1, LSO: 1/(1-L), decaying: 1/omega(L)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .panel import Panel, make_panel

OutlierKind = Literal["AO", "LSO", "decaying"]

PERIOD = 30


@dataclass(frozen=True)
class DgpParams:
    """Scales of the simulated components.

    Per series, five draws ``phi_1..phi_5 ~ U(0, 1)`` set
    ``var_level = level_scale * phi_1``, ``var_slope = slope_scale * phi_2``,
    ``sigma_s = seasonal_scale * phi_3`` and the seasonal knot values
    ``(phi_4, phi_4, phi_5, phi_4) * sigma_s``.  The slope is switched off by
    default, which makes each trend a local level.
    """

    level_scale: float = 1e-3
    slope_scale: float = 0.0
    var_cycle_noise: float = 0.0
    seasonal_scale: float = 100.0
    control_points: tuple[float, ...] = (0.0, 14.0, 15.0, 30.0)
    noise_var: float = 1.0
    noise_cov: np.ndarray | None = field(default=None, repr=False)
    start_date: str = "2021-04-01"

    def __post_init__(self) -> None:
        for name in ("level_scale", "slope_scale", "var_cycle_noise", "seasonal_scale", "noise_var"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        cp = np.asarray(self.control_points, dtype=float)
        if cp.size != 4 or np.any(np.diff(cp) <= 0) or cp[0] < 0 or cp[-1] > PERIOD:
            raise ValueError("control points must be 4 strictly increasing values in [0, 30]")


def seasonal_basis(control_points: Sequence[float] = (0.0, 14.0, 15.0, 30.0)) -> CubicSpline:
    """Periodic cubic spline through ``(0, 0, 1, 0)`` at the control points.

    The seasonal with knot values ``(A, A, B, A)`` is ``A + (B - A) * basis``.
    A periodic spline needs equal values at both ends of the period, so the
    last knot repeats the first.
    """
    cp = np.asarray(control_points, dtype=float)
    x = cp if cp[0] == 0 and cp[-1] == PERIOD else np.concatenate(([cp[0]], cp[1:3], [cp[0] + PERIOD]))
    return CubicSpline(x, [0.0, 0.0, 1.0, 0.0], bc_type="periodic")


def seasonal_curve(t: np.ndarray, low: float, high: float, control_points: Sequence[float] = (0.0, 14.0, 15.0, 30.0)) -> np.ndarray:
    """Seasonal with knot values ``(low, low, high, low)`` at day offsets ``t``."""
    basis = seasonal_basis(control_points)
    cp0 = float(control_points[0])
    phase = cp0 + np.mod(np.asarray(t, dtype=float) - cp0, PERIOD)
    return low + (high - low) * basis(phase)


def simulate_dgp(
    params: DgpParams, d: int, n: int, seed: int | np.random.SeedSequence = 0
) -> Panel:
    """Simulate a ``d x n`` raw panel; series ``i`` uses the ``i``-th spawned child seed."""
    if d < 1 or n < 1:
        raise ValueError("d and n must be >= 1")
    t = np.arange(n, dtype=float)
    h = seasonal_curve(t, 0.0, 1.0, params.control_points)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(d + 1)
    x = np.empty((d, n))
    for i in range(d):
        rng = np.random.default_rng(children[i])
        phi = rng.uniform(0.0, 1.0, size=5)
        sd_level = math.sqrt(params.level_scale * phi[0])
        sd_slope = math.sqrt(params.slope_scale * phi[1])
        sigma_s = params.seasonal_scale * phi[2]
        lo, hi = sigma_s * phi[3], sigma_s * phi[4]
        # level_t = level_{t-1} + slope_{t-1} + e_t ; slope_t = slope_{t-1} + z_t
        e = rng.normal(0.0, 1.0, n) * sd_level
        z = rng.normal(0.0, 1.0, n) * sd_slope
        slope = np.cumsum(z)
        level = np.cumsum(e + np.concatenate(([0.0], slope[:-1])))
        cycle = lo + (hi - lo) * h
        if params.var_cycle_noise > 0:
            cycle = cycle + rng.normal(0.0, math.sqrt(params.var_cycle_noise), n)
        x[i] = level + cycle
    noise_rng = np.random.default_rng(children[d])
    if params.noise_cov is not None:
        cov = np.asarray(params.noise_cov, dtype=float)
        if cov.shape != (d, d):
            raise ValueError(f"noise_cov must be {d}x{d}")
        x += noise_rng.multivariate_normal(np.zeros(d), cov, size=n, method="cholesky").T
    elif params.noise_var > 0:
        x += noise_rng.normal(0.0, math.sqrt(params.noise_var), (d, n))
    return make_panel(x, start=params.start_date)


# ---------------------------------------------------------------------------
# Contamination


@dataclass(frozen=True)
class OutlierSpec:
    """One outlier pattern.  ``tau`` is a 0-based column index; ``delta`` is in
    units of the series' pre-contamination sample standard deviation."""

    kind: OutlierKind
    tau: int
    delta: float
    omega: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("AO", "LSO", "decaying"):
            raise ValueError(f"unknown outlier kind {self.kind!r}")
        if self.kind == "decaying":
            w = np.asarray(self.omega, dtype=float)
            if w.size == 0 or np.any(w <= 0) or w[0] >= 1 or np.any(np.diff(w) >= 0):
                raise ValueError("decaying outliers need 1 > omega_1 > ... > omega_p > 0")


@dataclass(frozen=True)
class TruthEntry:
    series: int
    tau: int
    kind: OutlierKind
    delta: float


GroundTruth = list[TruthEntry]


def impulse_response(omega: Sequence[float], n: int, tol: float = 1e-12) -> np.ndarray:
    """Coefficients of ``1 / (1 - w_1 L - ... - w_p L^p)`` up to length ``n``.

    Truncated (zeros thereafter) once the magnitude falls below ``tol``.
    """
    w = np.asarray(omega, dtype=float)
    psi = np.zeros(n)
    if n == 0:
        return psi
    psi[0] = 1.0
    for k in range(1, n):
        lags = psi[max(0, k - w.size) : k][::-1]
        psi[k] = float(np.dot(w[: lags.size], lags))
        if abs(psi[k]) < tol:
            psi[k] = 0.0
            break
    return psi


def signature(spec: OutlierSpec, n: int) -> np.ndarray:
    """Unit-delta signature of ``spec`` on ``n`` points."""
    if not 0 <= spec.tau < n:
        raise ValueError(f"tau={spec.tau} out of range for n={n}")
    s = np.zeros(n)
    if spec.kind == "AO":
        s[spec.tau] = 1.0
    elif spec.kind == "LSO":
        s[spec.tau :] = 1.0
    else:
        s[spec.tau :] = impulse_response(spec.omega, n - spec.tau)
    return s


def inject_outliers(
    panel: Panel,
    specs: Sequence[OutlierSpec],
    fraction: float,
    scales: np.ndarray | None = None,
) -> tuple[Panel, GroundTruth]:
    """Add every spec to each of the first ``ceil(fraction * d)`` series.

    ``scales`` overrides the per-series sample standard deviations that
    ``delta`` multiplies.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    y = np.array(panel.values, dtype=float)
    d, n = y.shape
    for spec in specs:
        if not 0 <= spec.tau < n:
            raise ValueError(f"tau={spec.tau} out of range for n={n}")
    sigma = np.std(y, axis=1, ddof=1) if scales is None else np.broadcast_to(np.asarray(scales, float), (d,))
    n_bad = math.ceil(fraction * d - 1e-12)
    truth: GroundTruth = []
    seen: set[tuple[int, int]] = set()
    for spec in specs:
        sig = signature(spec, n)
        for i in range(n_bad):
            if (i, spec.tau) in seen:
                raise ValueError(f"duplicate outlier at series {i}, tau {spec.tau}")
            seen.add((i, spec.tau))
            delta = spec.delta * float(sigma[i])
            y[i] += delta * sig
            truth.append(TruthEntry(i, spec.tau, spec.kind, delta))
    return panel.with_values(y), truth


def write_truth(truth: GroundTruth, ids: Sequence[str], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series_id", "tau", "kind", "delta"])
        for e in truth:
            w.writerow([ids[e.series], e.tau, e.kind, repr(e.delta)])
