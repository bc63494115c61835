"""IV Frechet regression for quantile-function outcomes.

All fits are computed in demeaned coordinates: with ``c_j = X_j - mu_X`` the
fitted curve at ``X_j`` is ``beta_0(u) + beta_1(u)' c_j``. Optional group
weights are normalized to mean one and replace every sample mean by a
weighted mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import (
    DegenerateCoordinateError,
    DesignError,
    GridMismatchError,
    NonFiniteInputError,
    SingularCovariatesError,
    SingularInstrumentsError,
    WeakRankError,
)
from .isotonic import ProjectionResult, project_rows
from .quantile_core import QuantileCurve, QuantileGrid

RANK_TOL = 1e-10


def _as_matrix(a, n_rows=None, name="array") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DesignError(f"{name} must be a vector or a matrix")
    if n_rows is not None and a.shape[0] != n_rows:
        raise DesignError(f"{name} has {a.shape[0]} rows, expected {n_rows}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInputError(f"{name} contains NaN or inf")
    return a


@dataclass(frozen=True, eq=False)
class GroupedDesign:
    """Group-level covariates, instruments and outcome quantile curves.

    ``Z`` holds the instruments without an intercept column; included
    exogenous covariates appear in both ``X`` and ``Z``.
    """

    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    grid: QuantileGrid
    obs_weight: np.ndarray | None = None
    cluster: np.ndarray | None = None

    def __post_init__(self):
        Y = _as_matrix(self.Y, name="Y")
        n = Y.shape[0]
        X = _as_matrix(self.X, n, "X")
        Z = _as_matrix(self.Z, n, "Z")
        if Y.shape[1] != len(self.grid):
            raise GridMismatchError("outcome curves do not match the grid length")
        p, l = X.shape[1], Z.shape[1]
        if not l >= p >= 1:
            raise DesignError(f"need l >= p >= 1 instruments, got p={p}, l={l}")
        if n < p + 2:
            raise DesignError(f"need at least p + 2 = {p + 2} groups, got {n}")
        for name, arr in (("X", X), ("Z", Z), ("Y", Y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.obs_weight is not None:
            w = np.asarray(self.obs_weight, dtype=float).ravel()
            if w.shape != (n,) or not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise DesignError("observation weights must be n strictly positive numbers")
            w = w / w.mean()
            w.setflags(write=False)
            object.__setattr__(self, "obs_weight", w)
        if self.cluster is not None:
            c = np.asarray(self.cluster).ravel()
            if c.shape != (n,):
                raise DesignError("cluster ids must have one entry per group")
            object.__setattr__(self, "cluster", c)

    @classmethod
    def from_curves(cls, X, Z, curves, obs_weight=None, cluster=None) -> "GroupedDesign":
        curves = list(curves)
        grid = curves[0].grid
        if any(c.grid != grid for c in curves):
            raise GridMismatchError("all outcome curves must share one grid")
        return cls(X, Z, np.stack([c.values for c in curves]), grid, obs_weight, cluster)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def l(self) -> int:
        return self.Z.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.ones(self.n) if self.obs_weight is None else self.obs_weight

    @property
    def outcomes(self) -> list[QuantileCurve]:
        return [QuantileCurve(self.grid, y) for y in self.Y]


@dataclass(frozen=True, eq=False)
class MomentSet:
    mu_X: np.ndarray
    mu_Z: np.ndarray
    Sigma_XX: np.ndarray
    Sigma_ZX: np.ndarray
    Sigma_ZZ: np.ndarray
    S_2sls: np.ndarray
    cond_ZZ: float
    cond_XX: float
    cond_rank: float

    @property
    def T(self) -> np.ndarray:
        """Block-diagonal map ``diag(1, S_2sls)`` from scores to coefficients."""
        p, l = self.S_2sls.shape
        T = np.zeros((p + 1, l + 1))
        T[0, 0] = 1.0
        T[1:, 1:] = self.S_2sls
        return T


def _eig_condition(M: np.ndarray, what: str, exc) -> tuple[np.ndarray, float]:
    eig, vec = np.linalg.eigh(M)
    top = eig[-1]
    if top <= 0 or eig[0] <= RANK_TOL * top:
        cond = np.inf if eig[0] <= 0 else top / eig[0]
        raise exc(f"{what} is numerically singular", cond)
    return (eig, vec), float(top / eig[0])


def compute_moments(design: GroupedDesign) -> MomentSet:
    """Weighted centered moments and the 2SLS map ``S = (A'M A)^-1 A'M``."""
    w = design.weights
    n = design.n
    mu_X = w @ design.X / n
    mu_Z = w @ design.Z / n
    C = design.X - mu_X
    Zc = design.Z - mu_Z
    WZc = Zc * w[:, None]
    Sigma_ZZ = WZc.T @ Zc / n
    Sigma_ZX = WZc.T @ C / n
    Sigma_XX = (C * w[:, None]).T @ C / n

    (eig_zz, vec_zz), cond_zz = _eig_condition(Sigma_ZZ, "instrument covariance Sigma_ZZ",
                                                SingularInstrumentsError)
    (eig_xx, vec_xx), cond_xx = _eig_condition(Sigma_XX, "covariate covariance Sigma_XX",
                                                SingularCovariatesError)
    # Canonical correlations between instruments and covariates.
    zz_isqrt = (vec_zz / np.sqrt(eig_zz)) @ vec_zz.T
    xx_isqrt = (vec_xx / np.sqrt(eig_xx)) @ vec_xx.T
    canon = np.linalg.svd(zz_isqrt @ Sigma_ZX @ xx_isqrt, compute_uv=False)
    cond_rank = float(np.inf if canon[-1] <= 0 else canon[0] / canon[-1])
    if canon[-1] <= RANK_TOL:
        raise WeakRankError("Sigma_ZX is rank deficient: instruments do not identify all covariates",
                            cond_rank)

    zz = linalg.cho_factor(Sigma_ZZ)
    MA = linalg.cho_solve(zz, Sigma_ZX)
    S = linalg.cho_solve(linalg.cho_factor(Sigma_ZX.T @ MA), MA.T)
    return MomentSet(mu_X, mu_Z, Sigma_XX, Sigma_ZX, Sigma_ZZ, S, cond_zz, cond_xx, cond_rank)


def iv_weight(moments: MomentSet, z, x) -> np.ndarray | float:
    """Plug-in IV weight ``1 + (x - mu_X)' S (z - mu_Z)``; may be negative.

    ``z`` may be a single instrument vector or an ``(n, l)`` matrix.
    """
    dx = np.asarray(x, dtype=float) - moments.mu_X
    dz = np.asarray(z, dtype=float) - moments.mu_Z
    s = 1.0 + dz @ (moments.S_2sls.T @ dx)
    return float(s) if np.ndim(s) == 0 else s


@dataclass(frozen=True, eq=False)
class CoefficientCurves:
    """Intercept and slope functions stacked as rows of ``values`` (``(p+1, Q)``)."""

    grid: QuantileGrid
    values: np.ndarray
    variant: str
    mu_X: np.ndarray

    def __post_init__(self):
        if self.variant not in ("unprojected", "projected", "reference"):
            raise ValueError(f"unknown coefficient variant {self.variant!r}")
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[1] != len(self.grid):
            raise GridMismatchError("coefficient curves do not match the grid")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "mu_X", np.atleast_1d(np.asarray(self.mu_X, dtype=float)))

    @property
    def p(self) -> int:
        return self.values.shape[0] - 1

    @property
    def beta0(self) -> QuantileCurve:
        return QuantileCurve(self.grid, self.values[0])

    @property
    def beta1(self) -> list[QuantileCurve]:
        return [QuantileCurve(self.grid, v) for v in self.values[1:]]

    def evaluate(self, x) -> np.ndarray:
        """Fitted curves at covariate rows ``x`` (``(n, p)`` or ``(p,)``)."""
        c = np.asarray(x, dtype=float) - self.mu_X
        return self.values[0] + c @ self.values[1:]

    def raw_intercept(self) -> np.ndarray:
        """Intercept in raw-X coordinates, ``beta_0(u) - beta_1(u)' mu_X``."""
        return self.values[0] - self.mu_X @ self.values[1:]


def fitted_curve(design: GroupedDesign, moments: MomentSet, x) -> QuantileCurve:
    """IV-weighted average curve ``psi_x(u) = n^-1 sum_i w_i s_i(Z_i, x) Q_i(u)``."""
    s = iv_weight(moments, design.Z, x) * design.weights
    return QuantileCurve(design.grid, s @ design.Y / design.n)


def unconstrained_fit(design: GroupedDesign, moments: MomentSet | None = None) -> CoefficientCurves:
    """Quantile-by-quantile 2SLS, solved for the whole grid in one product."""
    m = compute_moments(design) if moments is None else moments
    w = design.weights
    WY = design.Y * w[:, None]
    beta0 = WY.sum(axis=0) / design.n
    Sigma_ZY = (design.Z - m.mu_Z).T @ WY / design.n
    values = np.vstack([beta0, m.S_2sls @ Sigma_ZY])
    return CoefficientCurves(design.grid, values, "unprojected", m.mu_X)


def regressor_matrix(design: GroupedDesign, mu_X) -> np.ndarray:
    """Rows ``(1, X_j - mu_X)``."""
    return np.hstack([np.ones((design.n, 1)), design.X - mu_X])


def ols_recover(Xhat: np.ndarray, w: np.ndarray, curves: np.ndarray) -> np.ndarray:
    """Weighted OLS of curves (``(..., n, Q)``) on ``Xhat``; returns ``(..., p+1, Q)``."""
    gram = linalg.cho_factor((Xhat * w[:, None]).T @ Xhat)
    rhs = np.einsum("jk,j,...jq->...kq", Xhat, w, curves)
    if rhs.ndim == 2:
        return linalg.cho_solve(gram, rhs)
    flat = np.moveaxis(rhs, -2, 0).reshape(rhs.shape[-2], -1)
    sol = linalg.cho_solve(gram, flat).reshape((rhs.shape[-2],) + rhs.shape[:-2] + rhs.shape[-1:])
    return np.moveaxis(sol, 0, -2)


@dataclass(frozen=True, eq=False)
class IVFRFit:
    """Both estimators plus per-group projection bookkeeping."""

    design: GroupedDesign
    moments: MomentSet
    unprojected: CoefficientCurves
    projected: CoefficientCurves
    fitted: np.ndarray = field(repr=False)
    projected_curves: np.ndarray = field(repr=False)
    active: np.ndarray = field(repr=False)

    @property
    def invalid_rate(self) -> float:
        """Share of groups whose fitted curve had to be projected."""
        return float(np.mean(self.active))

    @property
    def corrections(self) -> np.ndarray:
        """Projection corrections ``D_j(u) = Pi(psi_j)(u) - psi_j(u)``, ``(n, Q)``."""
        return self.projected_curves - self.fitted

    @property
    def projections(self) -> list[ProjectionResult]:
        grid = self.design.grid
        sup = np.max(np.abs(self.corrections), axis=1)
        return [ProjectionResult(QuantileCurve(grid, pc), float(s), bool(a))
                for pc, s, a in zip(self.projected_curves, sup, self.active)]


def ivfr_fit(design: GroupedDesign, moments: MomentSet | None = None) -> IVFRFit:
    """Projected IV Frechet regression.

    Evaluates the unconstrained fit at every observed ``X_j``, projects each
    curve onto the monotone cone, and regresses the projected curves on
    ``(1, X_j - mu_X)``.
    """
    m = compute_moments(design) if moments is None else moments
    unproj = unconstrained_fit(design, m)
    Xhat = regressor_matrix(design, m.mu_X)
    fitted = Xhat @ unproj.values
    projected_curves, active = project_rows(fitted, design.grid.weights)
    beta = ols_recover(Xhat, design.weights, projected_curves)
    proj = CoefficientCurves(design.grid, beta, "projected", m.mu_X)
    return IVFRFit(design, m, unproj, proj, fitted, projected_curves, active)


@dataclass(frozen=True, eq=False)
class FWLDiagnostics:
    k: int
    r_k: np.ndarray
    v_hat_k: float
    J_k: np.ndarray
    pi_k: np.ndarray
    e_jk: np.ndarray
    projection_gain: float
    cross_term: float
    lhs: float
    unprojected_error: float
    bound_rhs: float
    reference_monotone: bool
    feasible: bool

    @property
    def bound_slack(self) -> float:
        """``bound_rhs - lhs``; nonnegative whenever the reference is valid."""
        return self.bound_rhs - self.lhs

    @property
    def clean_bound_rhs(self) -> float:
        """Bound without the cross term, valid when ``feasible`` holds."""
        return self.unprojected_error - self.projection_gain


def fwl_decomposition(design: GroupedDesign, unproj: CoefficientCurves, proj: CoefficientCurves,
                      corrections: np.ndarray, k: int, reference: CoefficientCurves) -> FWLDiagnostics:
    """Coordinate-wise improvement bound for slope ``k`` (1-based).

    Partials the other centered covariates out of covariate ``k`` and splits
    the change in the ``k``-th slope error into the projection gain and the
    nuisance cross term. ``reference`` supplies the target coefficients; it
    should produce monotone curves at every ``X_j`` with nonzero residual,
    which is checked and reported rather than enforced.
    """
    p = design.p
    if not 1 <= k <= p:
        raise IndexError(f"slope index k must be in 1..{p}, got {k}")
    grid = design.grid
    wq = grid.weights
    w = design.weights
    n = design.n
    C = design.X - unproj.mu_X
    ck = C[:, k - 1]
    others = [i for i in range(p) if i != k - 1]
    C_other = C[:, others]
    if others:
        sw = np.sqrt(w)
        pi_k = np.linalg.lstsq(C_other * sw[:, None], ck * sw, rcond=None)[0]
    else:
        pi_k = np.zeros(0)
    r = ck - C_other @ pi_k
    v = float(np.sum(w * r**2) / n)
    scale = max(np.max(np.abs(ck)), 1.0)
    if v <= (RANK_TOL * scale) ** 2:
        raise DegenerateCoordinateError(f"covariate {k} is collinear with the others")
    J = np.flatnonzero(np.abs(r) > RANK_TOL * scale)

    d_unc = unproj.values - reference.values
    q_b = reference.evaluate(design.X)
    e = d_unc[0] + C_other @ (d_unc[1:][others] + np.outer(pi_k, d_unc[k]))
    D = corrections
    wJ = w[J]
    gain = float(np.sum(wJ * (D[J] ** 2 @ wq)) / (n * v))
    cross = float(np.sum(wJ * ((D[J] * e[J]) @ wq)) / (n * v))
    unproj_err = float(grid.integrate(d_unc[k] ** 2))
    lhs = float(grid.integrate((proj.values[k] - reference.values[k]) ** 2))
    ref_mono = bool(np.all(np.diff(q_b[J], axis=1) >= 0))
    feasible = bool(np.all(np.diff(q_b[J] + e[J], axis=1) >= 0))
    return FWLDiagnostics(k, r, v, J, pi_k, e, gain, cross, lhs, unproj_err,
                          unproj_err - gain - 2.0 * cross, ref_mono, feasible)


def joint_error(coeffs: CoefficientCurves, reference: CoefficientCurves, Sigma_XX) -> float:
    """``||b0 - ref0||^2 + ||b1 - ref1||^2_{Sigma_XX}`` integrated over the grid."""
    d = coeffs.values - reference.values
    quad = d[0] ** 2 + np.einsum("iq,ij,jq->q", d[1:], np.asarray(Sigma_XX), d[1:])
    return float(coeffs.grid.integrate(quad))
