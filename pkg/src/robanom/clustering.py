"""Per-series feature vectors and multi-restart k-means over them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .distance import OutlierReport
from .panel import Panel
from .trend import MONTHLY, WEEKLY, PanelFit, TrendCycleSpec

logger = logging.getLogger(__name__)

ACF_LAGS = 50
PERIODOGRAM_FREQS = (0.0, WEEKLY, MONTHLY)

FEATURE_NAMES: tuple[str, ...] = (
    ("mean", "std", "max", "min", "mad", "iqr", "skewness", "kurtosis",
     "trend_intercept", "trend_linear", "trend_quadratic",
     "amplitude_1", "phase_1", "amplitude_2", "phase_2")
    + tuple(f"acf_{j}" for j in range(1, ACF_LAGS + 1))
    + ("periodogram_zero", "periodogram_weekly", "periodogram_monthly")
)
N_FEATURES = len(FEATURE_NAMES)


# ---------------------------------------------------------------------------
# Features


def harmonic_phase(cos_coef: float, sin_coef: float) -> float:
    """``arctan(cos_coef / sin_coef)`` mapped into ``(-pi/2, pi/2]``."""
    if cos_coef == 0:
        return 0.0
    if sin_coef == 0:
        return math.pi / 2
    p = math.atan(cos_coef / sin_coef)
    return math.pi / 2 if p <= -math.pi / 2 else p  # ratio overflowed to -inf


def autocovariances(r: np.ndarray, lags: int = ACF_LAGS) -> np.ndarray:
    """``(n-j)^-1 sum_t r_t r_{t-j}`` for ``j = 1..lags`` (uncentred)."""
    n = r.size
    return np.array([np.dot(r[j:], r[: n - j]) / (n - j) for j in range(1, lags + 1)])


def periodogram_near(r: np.ndarray, targets=PERIODOGRAM_FREQS, width: int = 3) -> np.ndarray:
    """Largest periodogram ordinate among the ``width`` Fourier frequencies nearest each target.

    The periodogram is ``|sum_t r_t exp(-i w_k t)|^2 / n`` at ``w_k = 2 pi k / n``.
    """
    n = r.size
    I = np.abs(np.fft.rfft(r)) ** 2 / n
    w = 2 * np.pi * np.arange(I.size) / n
    out = []
    for lam in targets:
        near = np.argsort(np.abs(w - lam), kind="stable")[:width]
        out.append(I[near].max())
    return np.array(out)


def extract_features(r: np.ndarray, coefficients: np.ndarray, spec: TrendCycleSpec) -> np.ndarray:
    """The 68 descriptive features of one residual series and its trimmed fit.

    Moments use the sample sd (``n - 1``); the MAD is unscaled; trend terms
    above the fitted order and harmonics beyond the fitted ones are 0.
    """
    r = np.asarray(r, dtype=float)
    n = r.size
    if n <= ACF_LAGS:
        raise ValueError(f"need more than {ACF_LAGS} observations for the autocovariances, got {n}")
    if not np.all(np.isfinite(r)):
        raise ValueError("residuals contain non-finite values")
    mean = r.mean()
    sd = r.std(ddof=1)
    dev = r - mean
    if sd > 0:
        skew = (dev**3).sum() / ((n - 1) * sd**3)
        kurt = (dev**4).sum() / ((n - 1) * sd**4)
    else:
        skew = kurt = 0.0
    med = np.median(r)
    q75, q25 = np.quantile(r, [0.75, 0.25])
    moments = [mean, sd, r.max(), r.min(), np.median(np.abs(r - med)), q75 - q25, skew, kurt]

    beta = np.asarray(coefficients, dtype=float)
    trend = np.zeros(3)
    k = min(spec.trend_order + 1, 3)
    trend[:k] = beta[:k]
    harm = []
    base = spec.trend_order + 1
    for j in range(2):
        if j < len(spec.frequencies):
            c, s = beta[base + 2 * j], beta[base + 2 * j + 1]
            harm += [math.hypot(c, s), harmonic_phase(c, s)]
        else:
            harm += [0.0, 0.0]
    return np.concatenate([moments, trend, harm, autocovariances(r), periodogram_near(r)])


def feature_matrix(residuals: Panel, fit: PanelFit) -> np.ndarray:
    """``d x 68`` feature matrix; series whose fit failed get NaN rows."""
    coefs = fit.coefficient_matrix()
    F = np.full((residuals.d, N_FEATURES), np.nan)
    for i in range(residuals.d):
        if np.all(np.isfinite(coefs[i])) and np.all(np.isfinite(residuals.values[i])):
            F[i] = extract_features(residuals.values[i], coefs[i], fit.spec)
    return F


def standardize_columns(F: np.ndarray) -> np.ndarray:
    """Column z-scores; constant columns become 0."""
    F = np.asarray(F, dtype=float)
    sd = F.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (F - F.mean(axis=0)) / sd


# ---------------------------------------------------------------------------
# k-means


@dataclass
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    wss: float
    restart_wss: np.ndarray = field(repr=False)
    wss_path: np.ndarray = field(repr=False)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def intra_distances(self, F: np.ndarray) -> np.ndarray:
        """Mean Euclidean distance of each cluster's members to its centroid."""
        dist = np.linalg.norm(F - self.centroids[self.labels], axis=1)
        out = np.zeros(self.k)
        for c in range(self.k):
            m = self.labels == c
            out[c] = dist[m].mean() if m.any() else 0.0
        return out

    def inter_distances(self) -> np.ndarray:
        """Mean Euclidean distance of each centroid to the other centroids."""
        if self.k == 1:
            return np.zeros(1)
        D = np.linalg.norm(self.centroids[:, None, :] - self.centroids[None, :, :], axis=2)
        return D.sum(axis=1) / (self.k - 1)


def _sq_dist(F: np.ndarray, C: np.ndarray) -> np.ndarray:
    D = (F * F).sum(1)[:, None] - 2 * F @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(D, 0.0)


def _plus_plus(F: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    d = F.shape[0]
    idx = [int(rng.integers(d))]
    closest = _sq_dist(F, F[idx])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        nxt = int(rng.choice(d, p=closest / total)) if total > 0 else int(rng.integers(d))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dist(F, F[nxt : nxt + 1])[:, 0])
    return F[idx].copy()


def lloyd(F: np.ndarray, C: np.ndarray, max_iter: int = 300) -> tuple[np.ndarray, np.ndarray, list[float], int]:
    """Lloyd iterations from centroids ``C`` until the assignment stops changing.

    An emptied cluster is moved to the point farthest from its centroid.
    Returns the centroids, labels, the WSS after each update and the
    iteration count.  The returned labels are the nearest-centroid
    assignment for the returned centroids.
    """
    C = C.copy()
    K = C.shape[0]
    labels = np.full(F.shape[0], -1)
    path: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        D = _sq_dist(F, C)
        new = D.argmin(axis=1)
        for c in range(K):
            if not (new == c).any():
                d_own = D[np.arange(F.shape[0]), new]
                donors = np.bincount(new, minlength=K)[new] > 1
                far = int(np.argmax(np.where(donors, d_own, -1.0)))
                new[far] = c
        if it > 1 and np.array_equal(new, labels):
            break
        labels = new
        for c in range(K):
            C[c] = F[labels == c].mean(axis=0)
        path.append(float(((F - C[labels]) ** 2).sum()))
    labels = _sq_dist(F, C).argmin(axis=1)
    return C, labels, path, it


def kmeans(F: np.ndarray, K: int, restarts: int = 50, seed=0, max_iter: int = 300) -> ClusterModel:
    """Best of ``restarts`` k-means++-seeded Lloyd runs by total within-cluster SS."""
    F = np.asarray(F, dtype=float)
    d = F.shape[0]
    if not 1 <= K <= d:
        raise ValueError(f"K={K} must lie in [1, {d}]")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if not np.all(np.isfinite(F)):
        raise ValueError("feature matrix has non-finite entries")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    best = None
    wss_all = np.empty(restarts)
    for r, child in enumerate(ss.spawn(restarts)):
        C0 = _plus_plus(F, K, np.random.default_rng(child))
        C, labels, path, it = lloyd(F, C0, max_iter)
        wss = float(((F - C[labels]) ** 2).sum())
        wss_all[r] = wss
        if best is None or wss < best[2]:
            best = (C, labels, wss, path, it)
    C, labels, wss, path, it = best
    return ClusterModel(C, labels, wss, wss_all, np.array(path), it)


def elbow_curve(F: np.ndarray, k_max: int, restarts: int = 50, seed=0) -> tuple[np.ndarray, list[ClusterModel]]:
    """Best WSS for ``K = 1..k_max``, forced non-increasing.

    Each K's restarts compete with a run seeded from the ``K - 1`` solution
    plus one split of its widest cluster (the point farthest from its
    centroid becomes the new centroid); that run cannot end above the
    smaller-K WSS.
    """
    F = np.asarray(F, dtype=float)
    k_max = min(k_max, F.shape[0])
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(k_max)
    models: list[ClusterModel] = []
    for K in range(1, k_max + 1):
        m = kmeans(F, K, restarts, seeds[K - 1])
        if models:
            prev = models[-1]
            D = ((F - prev.centroids[prev.labels]) ** 2).sum(axis=1)
            C0 = np.vstack([prev.centroids, F[int(np.argmax(D))]])
            C, labels, path, it = lloyd(F, C0)
            wss = float(((F - C[labels]) ** 2).sum())
            if wss < m.wss:
                m = ClusterModel(C, labels, wss, np.append(m.restart_wss, wss), np.array(path), it)
            if m.wss > prev.wss:  # rounding only
                m.wss = prev.wss
        models.append(m)
    return np.array([m.wss for m in models]), models


# ---------------------------------------------------------------------------
# Overlap with detections


def overlap_report(model: ClusterModel, report: OutlierReport, series_ids, F: np.ndarray | None = None) -> pd.DataFrame:
    """Per-cluster size, distances and the share of member series with
    flags, LSO flags and AO flags, per detection method."""
    ids = list(series_ids)
    if len(ids) != model.labels.size:
        raise ValueError("series_ids and labels differ in length")
    frame = pd.DataFrame({"cluster": np.arange(model.k) + 1, "num_series": model.sizes()})
    frame["pct_series"] = 100.0 * frame.num_series / model.labels.size
    frame["inter_distance"] = model.inter_distances()
    frame["intra_distance"] = model.intra_distances(F) if F is not None else np.nan
    methods = sorted({e.method for e in report.events}) or [""]
    for method in methods:
        ev = [e for e in report.events if e.method == method]
        prefix = f"{method}_" if method else ""
        sets = {
            "flagged": {e.series_id for e in ev},
            "lso": {e.series_id for e in ev if e.typology == "LSO"},
            "ao": {e.series_id for e in ev if e.typology == "AO"},
        }
        for name, members in sets.items():
            hit = np.array([s in members for s in ids])
            pct = [100.0 * hit[model.labels == c].mean() if (model.labels == c).any() else 0.0 for c in range(model.k)]
            frame[f"{prefix}pct_{name}"] = pct
    return frame


def refined_subset(model: ClusterModel, report: OutlierReport, series_ids) -> set[str]:
    """Flagged series inside the cluster with the largest share of flagged members."""
    ids = list(series_ids)
    flagged = report.series()
    hit = np.array([s in flagged for s in ids])
    share = [hit[model.labels == c].mean() if (model.labels == c).any() else -1.0 for c in range(model.k)]
    best = int(np.argmax(share))
    return {s for s, lab, h in zip(ids, model.labels, hit) if lab == best and h}
