"""Sandwich variance, pointwise intervals, and multiplier-bootstrap uniform bands."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import GridMismatchError, ValidationError
from .estimator import CoefficientCurves, GroupedDesign, IVFRFit, MomentSet, ols_recover, regressor_matrix
from .isotonic import project_rows

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12
MIN_RECOMMENDED_B = 100
MIN_CLUSTERS = 10
VARIANTS = ("unprojected", "projected")


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    """Per-group scores ``(Q_j - Qbar, (Z_j - Zbar) * resid_j)``, shape ``(n, 1+l, Q)``.

    ``values`` are unweighted; observation weights are applied by the
    consumers, mirroring how they enter the moments.
    """

    values: np.ndarray
    residuals: np.ndarray
    weights: np.ndarray
    variant: str


@dataclass(frozen=True, eq=False)
class VarianceKernel:
    omega_diag: np.ndarray  # (Q, p+1, p+1)
    sigma: np.ndarray  # (p+1, Q)
    clustered: bool = False


@dataclass(frozen=True, eq=False)
class BootstrapDraws:
    draws: np.ndarray  # (B, p+1, Q), already scaled by sqrt(n)
    variant: str
    seed: tuple
    cluster_map: np.ndarray | None = None
    multiplier_law: str = "standard_normal"

    @property
    def B(self) -> int:
        return self.draws.shape[0]


@dataclass(frozen=True, eq=False)
class ConfidenceBands:
    level: float
    estimate: np.ndarray
    pointwise_lower: np.ndarray
    pointwise_upper: np.ndarray
    variant: str
    uniform_lower: np.ndarray | None = None
    uniform_upper: np.ndarray | None = None
    critical_values: np.ndarray | None = None

    @property
    def uniform_width(self) -> np.ndarray:
        """Grid-average width of the uniform band for each coefficient."""
        return np.mean(self.uniform_upper - self.uniform_lower, axis=1)

    @property
    def pointwise_width(self) -> np.ndarray:
        return np.mean(self.pointwise_upper - self.pointwise_lower, axis=1)


def _seed_tuple(seed) -> tuple:
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def score_matrix(design: GroupedDesign, coeffs: CoefficientCurves) -> ScoreMatrix:
    """Scores built from residuals of whichever coefficient variant is passed."""
    if coeffs.grid != design.grid:
        raise GridMismatchError("coefficients and design use different grids")
    w = design.weights
    n = design.n
    Y = design.Y
    resid = Y - coeffs.evaluate(design.X)
    Ybar = w @ Y / n
    Zc = design.Z - w @ design.Z / n
    values = np.empty((n, 1 + design.l, len(design.grid)))
    values[:, 0, :] = Y - Ybar
    values[:, 1:, :] = Zc[:, :, None] * resid[:, None, :]
    return ScoreMatrix(values, resid, w, coeffs.variant)


def cluster_index(cluster) -> tuple[np.ndarray, int]:
    """Map cluster ids to ``0..G-1`` in order of first appearance."""
    _, first, inverse = np.unique(np.asarray(cluster), return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse.ravel()], first.size


def sandwich_variance(score: ScoreMatrix, moments: MomentSet, cluster=None) -> VarianceKernel:
    """``Omega(u,u) = T (n^-1 sum Phi Phi') T'`` with ``T = diag(1, S_2sls)``.

    With ``cluster`` the weighted scores are summed within clusters before the
    outer product.
    """
    n = score.values.shape[0]
    phi = score.values * score.weights[:, None, None]
    if cluster is not None:
        idx, G = cluster_index(cluster)
        summed = np.zeros((G,) + phi.shape[1:])
        np.add.at(summed, idx, phi)
        phi = summed
    T = moments.T
    psi = np.einsum("ka,jaq->jkq", T, phi)
    omega = np.einsum("jkq,jlq->qkl", psi, psi) / n
    omega = 0.5 * (omega + np.transpose(omega, (0, 2, 1)))
    sigma = np.sqrt(np.clip(np.einsum("qkk->kq", omega), 0.0, None))
    return VarianceKernel(omega, sigma, cluster is not None)


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")


def pointwise_band(coeffs: CoefficientCurves, kernel: VarianceKernel, alpha: float, n: int) -> ConfidenceBands:
    """Normal intervals ``beta(u) +- z_{1-alpha/2} sigma(u) / sqrt(n)``."""
    _check_alpha(alpha)
    half = stats.norm.ppf(1.0 - alpha / 2.0) * kernel.sigma / math.sqrt(n)
    est = coeffs.values
    return ConfidenceBands(1.0 - alpha, est, est - half, est + half, coeffs.variant)


def empirical_quantile_of_sup(draws, sigma, alpha: float) -> np.ndarray:
    """Critical value per coefficient from bootstrap draws ``(B, p+1, Q)``.

    Returns the ``ceil((1-alpha) B)``-th order statistic of the studentized
    sup statistics. Grid points with ``sigma < 1e-12`` are left out of the sup.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 3 or draws.shape[0] == 0:
        raise ValidationError("need a non-empty (B, p+1, Q) array of draws")
    _check_alpha(alpha)
    sigma = np.asarray(sigma, dtype=float)
    keep = sigma >= SIGMA_FLOOR
    if not np.all(keep):
        log.warning("excluding %d grid points with sigma below %g from the sup statistic",
                    int(np.sum(~keep)), SIGMA_FLOOR)
    safe = np.where(keep, sigma, 1.0)
    ratio = np.where(keep, np.abs(draws) / safe, 0.0)
    sups = np.sort(ratio.max(axis=2), axis=0)
    B = draws.shape[0]
    rank = max(1, math.ceil(round((1.0 - alpha) * B, 9)))
    return sups[min(rank, B) - 1].copy()


def draw_multipliers(seed, b: int, size: int) -> np.ndarray:
    """Standard normal multipliers for draw ``b``, independent of any schedule."""
    ss = np.random.SeedSequence(list(_seed_tuple(seed)) + [int(b)])
    return np.random.Generator(np.random.PCG64(ss)).standard_normal(size)


def multiplier_bootstrap(fit: IVFRFit, B: int, alpha: float = 0.05, variant: str = "unprojected",
                         cluster=None, seed=0, multipliers=None, chunk: int = 64,
                         kernels: dict | None = None):
    """Multiplier bootstrap for the coefficient process and its uniform band.

    ``unprojected`` draws are ``T n^-1/2 sum_j omega_j Phi_j``. ``projected``
    draws perturb the unconstrained coefficients by the same score sum,
    project the implied fitted curves at every ``X_j``, recover coefficients
    by OLS and return ``sqrt(n)`` times the change in the projected estimate.
    Both variants draw the same multipliers for a given seed. With a cluster
    vector one multiplier is shared by every group of a cluster.

    ``multipliers`` (shape ``(B, n)`` or ``(B, G)``) overrides the random draws.
    Returns ``(BootstrapDraws, ConfidenceBands)``.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if B < 1:
        raise ValidationError(f"need at least one bootstrap draw, got B={B}")
    _check_alpha(alpha)
    if B < MIN_RECOMMENDED_B:
        warnings.warn(f"B={B} bootstrap draws is below the recommended {MIN_RECOMMENDED_B}",
                      RuntimeWarning, stacklevel=2)
    design, m = fit.design, fit.moments
    n = design.n
    seed = _seed_tuple(seed)
    if cluster is not None:
        idx, G = cluster_index(cluster)
        if G < MIN_CLUSTERS:
            warnings.warn(f"only {G} clusters: the cluster bootstrap is likely degenerate",
                          RuntimeWarning, stacklevel=2)
        if G == n and np.array_equal(idx, np.arange(n)):
            idx = None  # singleton clusters: same draws as the unclustered bootstrap
    else:
        idx, G = None, n
    if multipliers is not None:
        multipliers = np.asarray(multipliers, dtype=float)
        if multipliers.shape != (B, G):
            raise ValidationError(f"injected multipliers must have shape {(B, G)}")

    kernels = {} if kernels is None else kernels
    unproj_score = score_matrix(design, fit.unprojected)
    coeffs = fit.unprojected if variant == "unprojected" else fit.projected
    if variant not in kernels:
        score = unproj_score if variant == "unprojected" else score_matrix(design, coeffs)
        kernels[variant] = sandwich_variance(score, m, cluster)
    kernel = kernels[variant]

    # T applied once to the weighted scores: (n, p+1, Q).
    psi = np.einsum("ka,jaq->jkq", m.T, unproj_score.values * design.weights[:, None, None])
    psi_flat = psi.reshape(n, -1)
    Xhat = regressor_matrix(design, m.mu_X)
    wq = design.grid.weights
    shape = fit.unprojected.values.shape
    out = np.empty((B,) + shape)
    for start in range(0, B, chunk):
        stop = min(start + chunk, B)
        if multipliers is None:
            omega = np.stack([draw_multipliers(seed, b, G) for b in range(start, stop)])
        else:
            omega = multipliers[start:stop]
        if idx is not None:
            omega = omega[:, idx]
        pert = (omega @ psi_flat).reshape((stop - start,) + shape) / n
        if variant == "unprojected":
            out[start:stop] = math.sqrt(n) * pert
            continue
        beta_star = fit.unprojected.values + pert
        curves = np.einsum("jk,bkq->bjq", Xhat, beta_star)
        projected, _ = project_rows(curves, wq)
        beta_hat_star = ols_recover(Xhat, design.weights, projected)
        out[start:stop] = math.sqrt(n) * (beta_hat_star - fit.projected.values)

    crit = empirical_quantile_of_sup(out, kernel.sigma, alpha)
    bands = pointwise_band(coeffs, kernel, alpha, n)
    half = crit[:, None] * kernel.sigma / math.sqrt(n)
    bands = ConfidenceBands(bands.level, bands.estimate, bands.pointwise_lower, bands.pointwise_upper,
                            variant, coeffs.values - half, coeffs.values + half, crit)
    cmap = None if cluster is None else cluster_index(cluster)[0]
    return BootstrapDraws(out, variant, seed, cmap), bands


def uniform_contains_pointwise(bands: ConfidenceBands) -> np.ndarray:
    """Per coefficient: does the uniform band contain the pointwise band everywhere?"""
    lo = np.all(bands.uniform_lower <= bands.pointwise_lower + 1e-15, axis=1)
    hi = np.all(bands.uniform_upper >= bands.pointwise_upper - 1e-15, axis=1)
    return lo & hi
