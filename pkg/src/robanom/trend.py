"""Deterministic trend + harmonic regression fitted by least trimmed squares."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .panel import Panel

logger = logging.getLogger(__name__)

WEEKLY = 2 * math.pi / 7
MONTHLY = 2 * math.pi / 30


class FitError(RuntimeError):
    """Raised when a trimmed fit cannot be computed."""


@dataclass(frozen=True)
class TrendCycleSpec:
    """Polynomial trend of order ``trend_order`` plus one cos/sin pair per frequency."""

    trend_order: int = 2
    frequencies: tuple[float, ...] = (WEEKLY, MONTHLY)

    def __post_init__(self) -> None:
        if self.trend_order < 0:
            raise ValueError("trend_order must be >= 0")
        for lam in self.frequencies:
            if not 0 < lam <= math.pi:
                raise ValueError(f"frequency {lam} outside (0, pi]")

    @property
    def width(self) -> int:
        return 1 + self.trend_order + 2 * len(self.frequencies)

    @classmethod
    def harmonics(cls, base: float, count: int, trend_order: int = 2) -> "TrendCycleSpec":
        """``count`` harmonics ``base, 2*base, ...`` of one fundamental frequency."""
        return cls(trend_order, tuple(base * (j + 1) for j in range(count)))


def build_design(n: int, spec: TrendCycleSpec, start: int = 1) -> np.ndarray:
    """Rows ``(1, t, ..., t^v, cos(l_1 t), sin(l_1 t), ...)`` for ``t = start .. start+n-1``."""
    if n < spec.width:
        raise ValueError(f"n={n} too small for design width {spec.width}")
    t = np.arange(start, start + n, dtype=float)
    cols = [t**j for j in range(spec.trend_order + 1)]
    for lam in spec.frequencies:
        cols += [np.cos(lam * t), np.sin(lam * t)]
    return np.column_stack(cols)


def design_row(t: int, spec: TrendCycleSpec) -> np.ndarray:
    """Single design row at time index ``t`` (same convention as :func:`build_design`)."""
    tt = float(t)
    row = [tt**j for j in range(spec.trend_order + 1)]
    for lam in spec.frequencies:
        row += [math.cos(lam * tt), math.sin(lam * tt)]
    return np.array(row)


@dataclass(frozen=True)
class RobustFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    h: int
    objective: float
    subsets_used: int
    history: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def trimmed_sum(sq: np.ndarray, h: int) -> np.ndarray:
    """Sum of the ``h`` smallest entries along the last axis."""
    if h >= sq.shape[-1]:
        return sq.sum(axis=-1)
    return np.partition(sq, h - 1, axis=-1)[..., :h].sum(axis=-1)


def h_subset_mask(sq: np.ndarray, h: int) -> np.ndarray:
    """Boolean mask of the ``h`` smallest entries per row; ties go to the lower index."""
    n = sq.shape[-1]
    if h >= n:
        return np.ones(sq.shape, dtype=bool)
    kth = np.partition(sq, h - 1, axis=-1)[..., h - 1 : h]
    mask = sq <= kth
    crowded = mask.sum(axis=-1) > h
    if crowded.any():
        rows = sq[crowded]
        k = kth[crowded]
        below = rows < k
        tied = rows == k
        room = h - below.sum(axis=-1, keepdims=True)
        mask[crowded] = below | (tied & (np.cumsum(tied, axis=-1) <= room))
    return mask


def _masked_ols(Xs: np.ndarray, y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # one OLS per mask row via Gram matrices; columns of Xs are pre-equilibrated
    n, p = Xs.shape
    w = mask.astype(float)
    outer = (Xs[:, :, None] * Xs[:, None, :]).reshape(n, p * p)
    gram = (w @ outer).reshape(-1, p, p)
    rhs = w @ (Xs * y[:, None])
    try:
        return np.linalg.solve(gram, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        beta = np.full((mask.shape[0], p), np.nan)
        for j in range(mask.shape[0]):
            try:
                beta[j] = np.linalg.solve(gram[j], rhs[j])
            except np.linalg.LinAlgError:
                pass
        return beta


def _draw_elemental(
    Xs: np.ndarray, n_subsets: int, rng: np.random.Generator
) -> tuple[np.ndarray, int]:
    n, p = Xs.shape
    chosen: list[np.ndarray] = []
    have, drawn, cap = 0, 0, 10 * n_subsets
    while have < n_subsets:
        m = min(n_subsets - have, cap - drawn)
        if m <= 0:
            break
        idx = np.sort(rng.integers(0, n, size=(m, p)), axis=1)
        idx = idx[np.all(np.diff(idx, axis=1) > 0, axis=1)]  # sampling without replacement
        drawn += m
        if idx.size == 0:
            continue
        sub = Xs[idx]
        sign, logdet = np.linalg.slogdet(sub)
        # relative to the Hadamard bound, so the test is scale free
        bound = np.log(np.linalg.norm(sub, axis=2)).sum(axis=1)
        ok = (sign != 0) & (logdet - bound > math.log(1e-12))
        if ok.any():
            chosen.append(idx[ok])
            have += int(ok.sum())
    if have == 0:
        raise FitError("every elemental subset was singular")
    if have < n_subsets:
        logger.warning("only %d nonsingular elemental subsets after %d draws", have, drawn)
    return np.concatenate(chosen)[:n_subsets], drawn


def lte_fit(
    y: np.ndarray,
    X: np.ndarray,
    h: int | None = None,
    n_subsets: int = 500,
    seed=0,
    csteps: int = 1,
) -> RobustFit:
    """Least trimmed squares by elemental starts and concentration.

    For each of ``n_subsets`` random ``p``-point subsets: exact fit, take the
    ``h`` smallest squared residuals over all ``n`` points, refit by OLS on
    those (``csteps`` times), and keep the refit whose ``h`` smallest squared
    residuals sum lowest.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError(f"y has shape {y.shape}, design has {n} rows")
    if h is None:
        h = int(math.floor(0.75 * n))
    if h < p:
        raise FitError(f"h={h} smaller than design width {p}")
    if h > n:
        raise ValueError(f"h={h} exceeds n={n}")
    if not np.all(np.isfinite(y)):
        raise FitError("non-finite observations")
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    rng = _as_rng(seed)

    idx, drawn = _draw_elemental(Xs, n_subsets, rng)
    beta = np.linalg.solve(Xs[idx], y[idx][..., None])[..., 0]
    mask = None
    for _ in range(max(csteps, 1)):
        res = y[None, :] - beta @ Xs.T
        new = h_subset_mask(res * res, h)
        if mask is not None and np.array_equal(new, mask):
            break  # every start has reached its fixed point
        mask = new
        beta = _masked_ols(Xs, y, mask)
    res = y[None, :] - beta @ Xs.T
    ss = trimmed_sum(res * res, h)
    ss = np.where(np.isfinite(ss), ss, np.inf)
    if not np.isfinite(ss).any():
        raise FitError("no concentration step produced a finite fit")
    history = np.minimum.accumulate(ss)
    best = int(np.argmin(ss))

    # polish the winner on its own h-subset with an orthogonal solver
    prev = y[None, :] - (np.linalg.solve(Xs[idx[best]], y[idx[best]]) @ Xs.T)[None, :]
    keep = h_subset_mask(prev * prev, h)[0]
    for _ in range(max(csteps, 1) - 1):
        coef_s = np.linalg.lstsq(Xs[keep], y[keep], rcond=None)[0]
        r = y - Xs @ coef_s
        nxt = h_subset_mask((r * r)[None, :], h)[0]
        if np.array_equal(nxt, keep):
            break
        keep = nxt
    coef_s = np.linalg.lstsq(Xs[keep], y[keep], rcond=None)[0]
    coef = coef_s / scale
    resid = y - X @ coef
    objective = float(trimmed_sum(resid * resid, h))
    return RobustFit(coef, resid, h, objective, drawn, history)


def ols_fit(y: np.ndarray, X: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(np.asarray(X, float), np.asarray(y, float), rcond=None)
    return coef


def series_seeds(seed, d: int) -> list[np.random.SeedSequence]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(d)


@dataclass
class PanelFit:
    fits: list[RobustFit | None]
    residuals: Panel
    spec: TrendCycleSpec
    failures: dict[str, str]

    def coefficient_matrix(self) -> np.ndarray:
        width = self.spec.width
        out = np.full((len(self.fits), width), np.nan)
        for i, f in enumerate(self.fits):
            if f is not None:
                out[i] = f.coefficients
        return out


def fit_panel(
    panel: Panel,
    spec: TrendCycleSpec = TrendCycleSpec(),
    h_frac: float = 0.75,
    n_subsets: int = 500,
    seed=0,
    csteps: int = 1,
    n_jobs: int = 1,
) -> PanelFit:
    """Independent trimmed fits per series.

    A series whose fit fails is recorded in ``failures`` and gets a row of
    NaN residuals; the batch carries on.
    """
    X = build_design(panel.n, spec)
    h = int(math.floor(h_frac * panel.n))
    seeds = series_seeds(seed, panel.d)

    def one(i: int):
        try:
            return lte_fit(panel.values[i], X, h, n_subsets, np.random.default_rng(seeds[i]), csteps)
        except (FitError, np.linalg.LinAlgError) as exc:
            return exc

    if n_jobs == 1:
        results = [one(i) for i in range(panel.d)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(i) for i in range(panel.d))

    fits: list[RobustFit | None] = []
    failures: dict[str, str] = {}
    resid = np.full(panel.values.shape, np.nan)
    for i, r in enumerate(results):
        if isinstance(r, Exception):
            failures[panel.series_ids[i]] = str(r)
            fits.append(None)
        else:
            fits.append(r)
            resid[i] = r.residuals
    if failures:
        logger.warning("%d series failed the trimmed fit", len(failures))
    return PanelFit(fits, panel.with_values(resid, "residual"), spec, failures)
