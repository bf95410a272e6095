"""Univariate robust scales and robust location/scatter estimators.

All estimators take an ``n x d`` array with observations in rows (the
transpose of a :class:`~robanom.panel.Panel`'s ``values``).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

Method = Literal["OGK", "MRCD", "COM", "FEAU"]

MAD_NORMAL = 1.482602218505602  # 1 / Phi^{-1}(3/4)

TAU_C1 = 4.5
TAU_C2 = 3.0


class DegenerateScaleError(ValueError):
    """A variable has zero robust scale."""

    def __init__(self, message: str, columns: list[int]):
        super().__init__(message)
        self.columns = columns


@dataclass
class ScatterEstimate:
    sigma: np.ndarray
    scales: np.ndarray
    method: Method
    location: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.sigma).copy()


# ---------------------------------------------------------------------------
# Univariate


def mad(x: np.ndarray, axis: int = -1, normalize: bool = False) -> np.ndarray | float:
    """Median absolute deviation from the median (raw unless ``normalize``)."""
    x = np.asarray(x, dtype=float)
    med = np.median(x, axis=axis, keepdims=True)
    out = np.median(np.abs(x - med), axis=axis)
    if normalize:
        out = out * MAD_NORMAL
    return float(out) if np.ndim(out) == 0 else out


def _tau_consistency(c2: float = TAU_C2) -> float:
    # E[min(Z^2, a^2)] with a = c2 * Phi^{-1}(3/4), Z ~ N(0, 1)
    a = c2 / MAD_NORMAL
    inner = (2 * stats.norm.cdf(a) - 1) - 2 * a * stats.norm.pdf(a)
    return math.sqrt(inner + 2 * a * a * stats.norm.sf(a))


_TAU_NORM = _tau_consistency()


def tau_scale(x: np.ndarray, axis: int = -1, c1: float = TAU_C1, c2: float = TAU_C2) -> np.ndarray | float:
    """Tau-scale with raw-MAD initial scale, normalized to be consistent at the normal.

    Zero is returned where the MAD is zero (degenerate input).
    """
    x = np.asarray(x, dtype=float)
    x = np.moveaxis(x, axis, -1)
    if x.shape[-1] < 2:
        raise ValueError("tau_scale needs at least 2 observations")
    med = np.median(x, axis=-1, keepdims=True)
    s0 = np.median(np.abs(x - med), axis=-1, keepdims=True)
    degenerate = s0 == 0
    s0_safe = np.where(degenerate, 1.0, s0)
    u = np.clip((x - med) / (c1 * s0_safe), -2.0, 2.0)  # weights vanish beyond 1
    w = np.where(np.abs(u) < 1, (1 - u * u) ** 2, 0.0)
    mu = (w * x).sum(axis=-1, keepdims=True) / w.sum(axis=-1, keepdims=True)
    r = np.clip((x - mu) / s0_safe, -2 * c2, 2 * c2)
    rho = np.minimum(r * r, c2 * c2)
    tau = s0[..., 0] * np.sqrt(rho.mean(axis=-1)) / _TAU_NORM
    tau = np.where(degenerate[..., 0], 0.0, tau)
    return float(tau) if tau.ndim == 0 else tau


def tau_location(x: np.ndarray, axis: int = -1, c1: float = TAU_C1) -> np.ndarray | float:
    """Weighted mean used inside :func:`tau_scale`."""
    x = np.moveaxis(np.asarray(x, dtype=float), axis, -1)
    med = np.median(x, axis=-1, keepdims=True)
    s0 = np.median(np.abs(x - med), axis=-1, keepdims=True)
    s0 = np.where(s0 == 0, 1.0, s0)
    u = (x - med) / (c1 * s0)
    w = np.where(np.abs(u) < 1, (1 - u * u) ** 2, 0.0)
    out = (w * x).sum(axis=-1) / w.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def comedian(x: np.ndarray, y: np.ndarray) -> float:
    """``median((x - med x) * (y - med y))``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    return float(np.median((x - np.median(x)) * (y - np.median(y))))


def comedian_matrix(X: np.ndarray) -> np.ndarray:
    """Pairwise comedians of the columns of ``X`` (``n x d``)."""
    Xt = np.ascontiguousarray((X - np.median(X, axis=0)).T)
    d = Xt.shape[0]
    C = np.empty((d, d))
    for j in range(d):
        row = np.median(Xt[j] * Xt[j:], axis=-1)
        C[j, j:] = row
        C[j:, j] = row
    return C


# ---------------------------------------------------------------------------
# Linear algebra helpers


def sym_eig(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs sorted by decreasing eigenvalue, each vector's largest-|entry| positive."""
    A = 0.5 * (A + A.T)
    vals, vecs = np.linalg.eigh(A)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vals, vecs * signs


def _symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


def _check_scales(scales: np.ndarray, what: str) -> None:
    bad = np.where(~(scales > 0))[0].tolist()
    if bad:
        raise DegenerateScaleError(f"zero {what} in {len(bad)} series", bad)


# ---------------------------------------------------------------------------
# OGK


def pairwise_u(Z: np.ndarray, scale=tau_scale, chunk: int = 4_000_000) -> np.ndarray:
    """``u_jk = (s^2(z_j + z_k) - s^2(z_j - z_k)) / 4`` with ``u_jj = s^2(z_j)``."""
    Zt = np.ascontiguousarray(Z.T)
    d, n = Zt.shape
    U = np.empty((d, d))
    U[np.diag_indices(d)] = scale(Zt, axis=-1) ** 2
    rows_per = max(1, chunk // max(n, 1))
    for j in range(d - 1):
        for start in range(j + 1, d, rows_per):
            block = Zt[start : start + rows_per]
            plus = scale(Zt[j] + block, axis=-1)
            minus = scale(Zt[j] - block, axis=-1)
            u = 0.25 * (plus * plus - minus * minus)
            U[j, start : start + rows_per] = u
            U[start : start + rows_per, j] = u
    return U


def _ogk_core(Z: np.ndarray, scale=tau_scale, U: np.ndarray | None = None):
    if U is None:
        U = pairwise_u(Z, scale)
    _, E = sym_eig(U)
    V = Z @ E
    lam = scale(V, axis=0) ** 2
    sigma_z = (E * lam) @ E.T
    loc_z = E @ tau_location(V, axis=0)
    return _symmetrize(sigma_z), loc_z, U, E, lam


def ogk_scatter(X: np.ndarray) -> ScatterEstimate:
    """Orthogonalized Gnanadesikan-Kettenring scatter with tau-scales."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need an n x d array with n >= 2")
    B = np.atleast_1d(tau_scale(X, axis=0))
    _check_scales(B, "tau-scale")
    Z = X / B
    sigma_z, loc_z, U, E, lam = _ogk_core(Z)
    sigma = _symmetrize(sigma_z * np.outer(B, B))
    return ScatterEstimate(sigma, B, "OGK", B * loc_z, {"U": U, "eigenvalues": lam})


# ---------------------------------------------------------------------------
# COM


def com_scatter(X: np.ndarray, max_iter: int = 2) -> ScatterEstimate:
    """Comedian-based scatter, iterated by re-applying the step to the projected data.

    Series with zero MAD are excluded and padded with identity rows/columns.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    mad0 = np.atleast_1d(mad(X, axis=0))
    active = np.where(mad0 > 0)[0]
    excluded = np.where(~(mad0 > 0))[0].tolist()
    if excluded:
        logger.warning("COM: %d zero-MAD series excluded", len(excluded))
    Xa = X[:, active]
    Qtot = np.eye(active.size)
    Z = Xa
    iterations = 0
    for _ in range(max(max_iter, 1)):
        m = np.atleast_1d(mad(Z, axis=0))
        if np.any(m == 0):
            break
        delta = comedian_matrix(Z) / np.outer(m, m)
        _, E = sym_eig(delta)
        Q = m[:, None] * E  # Q = D^{-1} E
        Z = (Z / m) @ E  # Z' = Q^{-1} Z'_prev, Q^{-1} = E' D
        Qtot = Qtot @ Q
        iterations += 1
    gamma = np.atleast_1d(mad(Z, axis=0)) ** 2
    sigma_a = _symmetrize((Qtot * gamma) @ Qtot.T)
    loc_a = Qtot @ np.median(Z, axis=0)

    sigma = np.eye(d)
    sigma[np.ix_(active, active)] = sigma_a
    loc = np.zeros(d)
    loc[active] = loc_a
    scales = np.ones(d)
    scales[active] = mad0[active]
    return ScatterEstimate(sigma, scales, "COM", loc, {"iterations": iterations, "excluded": excluded})


# ---------------------------------------------------------------------------
# MRCD


@dataclass(frozen=True)
class MrcdConfig:
    h_frac: float = 0.75
    target: np.ndarray | None = field(default=None, repr=False)
    rho_grid: tuple[float, ...] = tuple(round(0.1 * k, 1) for k in range(11))
    max_condition: float = 1000.0
    min_eig_frac: float = 1e-6
    alpha_convention: Literal["trimmed", "standard"] = "trimmed"
    max_csteps: int = 100
    rho: float | None = None


def consistency_factor(n: int, h: int, d: int, convention: str = "trimmed") -> float:
    """``c_alpha`` for the regularized covariance.

    ``trimmed``: ``alpha = (n - h) / n`` and ``c = F_{d+2}(q_d(alpha)) / alpha``.
    ``standard``: ``alpha = h / n`` and ``c = alpha / F_{d+2}(q_d(alpha))``.
    """
    if convention == "trimmed":
        alpha = (n - h) / n
        return float(stats.chi2.cdf(stats.chi2.ppf(alpha, d), d + 2) / alpha)
    alpha = h / n
    return float(alpha / stats.chi2.cdf(stats.chi2.ppf(alpha, d), d + 2))


def _corr(A: np.ndarray) -> np.ndarray:
    A = A - A.mean(axis=0)
    s = np.sqrt((A * A).sum(axis=0))
    s[s == 0] = 1.0
    A = A / s
    return _symmetrize(A.T @ A)


def initial_scatters(Z: np.ndarray, ogk_sigma: np.ndarray | None = None) -> list[tuple[str, np.ndarray | None]]:
    """Six deterministic starting scatter matrices for standardized data ``Z``."""
    n, d = Z.shape
    out: list[tuple[str, np.ndarray | None]] = []
    out.append(("tanh", _corr(np.tanh(Z))))
    ranks = stats.rankdata(Z, axis=0)
    out.append(("spearman", _corr(ranks)))
    out.append(("normal_scores", _corr(stats.norm.ppf((ranks - 1 / 3) / (n + 1 / 3)))))
    norms = np.linalg.norm(Z, axis=1)
    norms[norms == 0] = 1.0
    K = Z / norms[:, None]
    out.append(("spatial_sign", _symmetrize(K.T @ K / n)))
    half = np.argsort(np.linalg.norm(Z, axis=1), kind="stable")[: int(math.ceil(n / 2))]
    out.append(("bacon", _symmetrize(np.cov(Z[half], rowvar=False).reshape(d, d))))
    if ogk_sigma is None:
        try:
            ogk_sigma = _ogk_core(Z)[0]
        except Exception as exc:  # pragma: no cover - defensive
            logger.warning("raw OGK start failed: %s", exc)
    out.append(("ogk", ogk_sigma))
    return out


def _start_location_scatter(Z: np.ndarray, S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # eigenvectors of S, robust variances of the projections, then spatial-median-like centre
    _, E = sym_eig(S)
    B = Z @ E
    lam = np.atleast_1d(tau_scale(B, axis=0)) ** 2
    if not np.any(lam > 0):
        raise np.linalg.LinAlgError("all projection scales are zero")
    # projections onto the null space of Z (d > n) have zero scale; keep the centre in-span
    safe = np.where(lam > 1e-12 * lam.max(), lam, np.inf)
    sigma = (E * lam) @ E.T
    mu = E @ (np.sqrt(np.where(np.isfinite(safe), safe, 0.0)) * np.median(B / np.sqrt(safe), axis=0))
    return mu, _symmetrize(sigma)


def _mahalanobis_sq(W: np.ndarray, mu: np.ndarray, K: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(K)
    sol = np.linalg.solve(L, (W - mu).T)
    return (sol * sol).sum(axis=0)


def _h_smallest(md: np.ndarray, h: int) -> np.ndarray:
    return np.sort(np.argsort(md, kind="stable")[:h])


def _regularized(W: np.ndarray, H: np.ndarray, rho: float, c: float, T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    WH = W[H]
    m = WH.mean(axis=0)
    C = WH - m
    S = C.T @ C / (len(H) - 1)
    return m, _symmetrize(rho * T + (1 - rho) * c * S)


def _choose_rho(S: np.ndarray, c: float, T: np.ndarray, cfg: MrcdConfig) -> float:
    d = S.shape[0]
    for rho in cfg.rho_grid:
        K = rho * T + (1 - rho) * c * S
        ev = np.linalg.eigvalsh(_symmetrize(K))
        lo, hi = ev[0], ev[-1]
        if lo >= cfg.min_eig_frac * np.trace(K) / d and lo > 0 and hi / lo <= cfg.max_condition:
            return float(rho)
    return float(cfg.rho_grid[-1])


def mrcd_scatter(X: np.ndarray, cfg: MrcdConfig = MrcdConfig(), ogk_sigma_z: np.ndarray | None = None) -> ScatterEstimate:
    """Minimum regularized covariance determinant scatter.

    ``ogk_sigma_z`` optionally supplies the OGK scatter of the tau-standardized
    data so the sixth start need not be recomputed.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    h = int(math.floor(cfg.h_frac * n))
    if h < 2:
        raise ValueError("MRCD needs h >= 2")
    centre = np.median(X, axis=0)
    D = np.atleast_1d(tau_scale(X, axis=0))
    _check_scales(D, "tau-scale")
    Z = (X - centre) / D
    T = np.eye(d) if cfg.target is None else np.asarray(cfg.target, dtype=float)
    t_vals, t_vecs = sym_eig(T)
    if np.any(t_vals <= 0):
        raise ValueError("target must be positive definite")
    W = (Z @ t_vecs) / np.sqrt(t_vals)
    I = np.eye(d)
    c = consistency_factor(n, h, d, cfg.alpha_convention)

    starts = []
    for name, S in initial_scatters(W, ogk_sigma_z if cfg.target is None else None):
        if S is None:
            continue
        try:
            mu, sigma = _start_location_scatter(W, S)
            rho_j = _choose_rho(sigma, 1.0, I, cfg)
            md = _mahalanobis_sq(W, mu, _symmetrize(rho_j * I + (1 - rho_j) * sigma))
        except np.linalg.LinAlgError as exc:
            warnings.warn(f"MRCD start {name!r} skipped: {exc}")
            continue
        starts.append((name, _h_smallest(md, h)))
    if not starts:
        raise np.linalg.LinAlgError("all MRCD starts failed")

    if cfg.rho is not None:
        rho = float(cfg.rho)
    else:
        rhos = []
        for _, H in starts:
            WH = W[H] - W[H].mean(axis=0)
            rhos.append(_choose_rho(WH.T @ WH / (h - 1), c, I, cfg))
        rho = max(rhos)

    candidates = []
    for name, H in starts:
        steps = 0
        for steps in range(1, cfg.max_csteps + 1):
            m, K = _regularized(W, H, rho, c, I)
            H_new = _h_smallest(_mahalanobis_sq(W, m, K), h)
            if np.array_equal(H_new, H):
                break
            H = H_new
        m, K = _regularized(W, H, rho, c, I)
        sign, logdet = np.linalg.slogdet(K)
        candidates.append({"start": name, "subset": H, "logdet": float(logdet), "csteps": steps, "mean": m, "K": K})
    best = min(range(len(candidates)), key=lambda k: candidates[k]["logdet"])
    win = candidates[best]

    A = t_vecs * np.sqrt(t_vals)  # Q Lambda^{1/2}
    sigma = _symmetrize(D[:, None] * (A @ win["K"] @ A.T) * D[None, :])
    loc = centre + D * (A @ win["mean"])
    diag = {
        "rho": rho,
        "c_alpha": c,
        "subset": win["subset"],
        "start": win["start"],
        "candidate_logdets": [cd["logdet"] for cd in candidates],
        "candidate_starts": [cd["start"] for cd in candidates],
        "winner": best,
    }
    return ScatterEstimate(sigma, D, "MRCD", loc, diag)


# ---------------------------------------------------------------------------
# FEAU (non-robust feature benchmark)

FEAU_FEATURES = ("mean", "std", "skewness", "kurtosis", "median", "iqr", "min", "max")


def raw_features(Y: np.ndarray) -> np.ndarray:
    """``d x 8`` matrix of :data:`FEAU_FEATURES` for series in the rows of ``Y``."""
    Y = np.asarray(Y, dtype=float)
    q75, q25 = np.percentile(Y, [75, 25], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        skew = stats.skew(Y, axis=1)
        kurt = stats.kurtosis(Y, axis=1, fisher=False)
    return np.column_stack(
        [Y.mean(axis=1), Y.std(axis=1, ddof=1), skew, kurt, np.median(Y, axis=1), q75 - q25, Y.min(axis=1), Y.max(axis=1)]
    )


@dataclass
class FeauResult:
    mean: np.ndarray
    covariance: np.ndarray
    distances: np.ndarray
    features: np.ndarray
    feature_names: tuple[str, ...]

    def series_location(self) -> np.ndarray:
        return self.features[:, 0]

    def series_scale(self) -> np.ndarray:
        return self.features[:, 1]

    def as_scatter(self) -> ScatterEstimate:
        """Per-series non-robust location and variance as a diagonal scatter."""
        s = self.series_scale()
        return ScatterEstimate(np.diag(s * s), s, "FEAU", self.series_location(), {"md": self.distances})


def feau_estimate(Y: np.ndarray) -> FeauResult:
    """Feature-space mean, covariance and Mahalanobis distance per series.

    ``Y`` holds series in rows (``d x n``).  Features constant across all
    series are dropped with a warning before standardization.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.shape[1] < 5:
        raise ValueError("FEAU needs n >= 5")
    F = raw_features(Y)
    F = np.nan_to_num(F, nan=0.0)
    sd = F.std(axis=0, ddof=1) if F.shape[0] > 1 else np.zeros(F.shape[1])
    keep = sd > 0
    if not keep.all():
        dropped = [FEAU_FEATURES[k] for k in np.where(~keep)[0]]
        warnings.warn(f"FEAU: constant features dropped: {dropped}")
    Fz = (F[:, keep] - F[:, keep].mean(axis=0)) / sd[keep]
    mu = Fz.mean(axis=0)
    if Fz.shape[1] == 0:
        cov = np.zeros((0, 0))
        md = np.zeros(Y.shape[0])
    else:
        cov = np.atleast_2d(np.cov(Fz, rowvar=False))
        diff = Fz - mu
        md = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", diff, np.linalg.pinv(cov), diff), 0.0))
    names = tuple(f for f, k in zip(FEAU_FEATURES, keep) if k)
    return FeauResult(mu, cov, md, F, names)


def estimate(X: np.ndarray, method: str, **kwargs) -> ScatterEstimate:
    method = method.upper()
    if method == "OGK":
        return ogk_scatter(X)
    if method == "MRCD":
        return mrcd_scatter(X, **kwargs)
    if method == "COM":
        return com_scatter(X, **kwargs)
    if method == "FEAU":
        return feau_estimate(np.asarray(X).T).as_scatter()
    raise ValueError(f"unknown scatter method {method!r}")
