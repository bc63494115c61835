"""Monte Carlo designs, instrument-strength calibration, metrics and the replication runner.

Each group's outcome draws follow

    Y_ij = sigma q0(U_ij) + U_ij / 2 + X_j gamma(U_ij) + (zeta_j - 1/2) U_ij + sum_k W_jk h_k(U_ij)

with ``q0`` the standard lognormal quantile function and
``gamma(u) = sqrt(u) + beta_slope sin(2 pi u)``. The first stage is
``X0_j = (pi_Z + delta (zeta_j - 1/2)) Z_j + zeta_j + nu_j`` with ``Z`` and
``nu`` distributed as ``exp(0.25 N(0, 1))``. Panels A to C standardize ``X0``
and bound it with ``B_X tanh(. / B_X)``; panel D keeps ``X = X0`` and drops
the base term.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import CalibrationError, ConfigError, GridMismatchError, IVFRError
from .estimator import CoefficientCurves, GroupedDesign, IVFRFit, fwl_decomposition, ivfr_fit
from .inference import multiplier_bootstrap
from .quantile_core import QuantileGrid, build_grid, empirical_quantiles

log = logging.getLogger(__name__)

PANELS = ("A", "B", "C", "D")
SIGMA_MARGIN = 1.05
SIGMA_RULE_POINTS = 1000
PI_Z_BOUNDS = (0.01, 50.0)
BOOT_STREAM = 2
SAMPLE_STREAM = 3


@dataclass(frozen=True)
class DgpConfig:
    panel: str = "A"
    n: int = 50
    N: int = 50
    p: int = 1
    delta: float = 0.0
    pi_Z: float = 1.0
    beta_slope: float = 0.0
    B_X: float = 1.5
    B_W: float = 1.5
    sigma: float | None = None
    grid: QuantileGrid = field(default_factory=lambda: build_grid(0.05, 0.95, 19))
    seed: int = 0
    exact_quantiles: bool = False

    def __post_init__(self):
        if self.panel not in PANELS:
            raise ConfigError(f"panel must be one of {PANELS}, got {self.panel!r}")
        if self.n < 5 or self.N < 2 or self.p < 1:
            raise ConfigError(f"need n >= 5, N >= 2, p >= 1; got n={self.n}, N={self.N}, p={self.p}")
        if self.B_X <= 0 or self.B_W <= 0:
            raise ConfigError("tanh bounds B_X and B_W must be positive")
        if self.n < self.p + 2:
            raise ConfigError(f"need n >= p + 2 groups, got n={self.n}, p={self.p}")
        if self.panel == "D" and (self.p != 1 or self.delta != 0 or self.beta_slope != 0):
            raise ConfigError("panel D is the single-regressor benchmark: p=1, delta=0, beta_slope=0")
        if self.panel == "A" and self.p != 1:
            raise ConfigError("panel A has a single regressor and no controls (p=1)")
        if self.pi_Z <= 0:
            raise ConfigError("pi_Z must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = {"a": self.grid.a, "b": self.grid.b, "Q": len(self.grid)}
        d["sigma_used"] = base_sigma(self)
        d["base_distribution"] = "none" if self.panel == "D" else "standard lognormal"
        return d


def gamma_curve(u, beta_slope: float = 0.0) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.sqrt(u) + beta_slope * np.sin(2 * np.pi * u)


def control_effect(k: int, u, panel: str) -> np.ndarray:
    """Direct effect ``h_k(u)`` of control ``k`` (1-based)."""
    u = np.asarray(u, dtype=float)
    if panel == "C":
        return u.copy() if k % 2 == 1 else 0.1 * np.sin(k * np.pi * u)
    return np.zeros_like(u)


def _control_slope_bound(k: int, u, panel: str) -> float:
    if panel != "C":
        return 0.0
    if k % 2 == 1:
        return 1.0
    return float(np.max(np.abs(0.1 * k * np.pi * np.cos(k * np.pi * u))))


def base_quantile(u) -> np.ndarray:
    """Standard lognormal quantile function ``exp(Phi^-1(u))``."""
    return np.exp(stats.norm.ppf(u))


def base_sigma(config: DgpConfig) -> float:
    """Scale of the base term; zero for panel D.

    Unless fixed in the config, chosen so that ``sigma m0`` exceeds
    ``B_X L_gamma + B_W sum_k L_k`` by a 5% margin, where ``m0`` is the
    minimal slope of the base quantile and the ``L`` are maximal absolute
    slopes of the coefficient curves on ``[a, b]``.
    """
    if config.panel == "D":
        return 0.0
    if config.sigma is not None:
        return float(config.sigma)
    u = np.linspace(config.grid.a, config.grid.b, SIGMA_RULE_POINTS)
    z = stats.norm.ppf(u)
    m0 = float(np.min(np.exp(z) / stats.norm.pdf(z)))
    L_gamma = float(np.max(np.abs(0.5 / np.sqrt(u) + 2 * np.pi * config.beta_slope * np.cos(2 * np.pi * u))))
    L_ctrl = sum(_control_slope_bound(k, u, config.panel) for k in range(1, config.p))
    return SIGMA_MARGIN * (config.B_X * L_gamma + config.B_W * L_ctrl) / m0


@dataclass(frozen=True, eq=False)
class TruthCurves:
    grid: QuantileGrid
    gamma: np.ndarray
    control_effects: np.ndarray  # (p-1, Q)
    intercept: np.ndarray  # raw-X coordinates

    @property
    def slopes(self) -> np.ndarray:
        return np.vstack([self.gamma[None, :], self.control_effects])

    def coefficients(self, mu_X) -> CoefficientCurves:
        """Truth in the demeaned coordinates of a fit centred at ``mu_X``."""
        mu_X = np.atleast_1d(np.asarray(mu_X, dtype=float))
        slopes = self.slopes
        return CoefficientCurves(self.grid, np.vstack([self.intercept + mu_X @ slopes, slopes]),
                                 "reference", mu_X)

    def conditional(self, X) -> np.ndarray:
        """Structural conditional quantile curves ``q(X_j, u)``, shape ``(n, Q)``."""
        return self.intercept + np.atleast_2d(np.asarray(X, dtype=float)) @ self.slopes


def truth_curves(config: DgpConfig) -> TruthCurves:
    u = config.grid.points
    gamma = gamma_curve(u, config.beta_slope)
    ctrl = np.array([control_effect(k, u, config.panel) for k in range(1, config.p)]).reshape(config.p - 1, u.size)
    intercept = u / 2 + base_sigma(config) * base_quantile(u)
    return TruthCurves(config.grid, gamma, ctrl, intercept)


@dataclass(frozen=True, eq=False)
class GroupDraws:
    """Group-level quantities of one replication, before outcome draws."""

    X: np.ndarray
    Z: np.ndarray
    zeta: np.ndarray
    W: np.ndarray  # (n, p-1)


def _streams(config: DgpConfig, rep: int):
    cov, out = np.random.SeedSequence([int(config.seed), int(rep)]).spawn(2)
    return np.random.default_rng(cov), np.random.default_rng(out)


def draw_groups(config: DgpConfig, rep: int, pi_Z: float | None = None) -> GroupDraws:
    rng, _ = _streams(config, rep)
    return _draw_groups(config, rng, config.pi_Z if pi_Z is None else pi_Z)


def _draw_groups(config: DgpConfig, rng, pi_Z: float) -> GroupDraws:
    n = config.n
    zeta = rng.random(n)
    Z = np.exp(0.25 * rng.standard_normal(n))
    nu = np.exp(0.25 * rng.standard_normal(n))
    W_raw = rng.standard_normal((n, config.p - 1))
    X0 = (pi_Z + config.delta * (zeta - 0.5)) * Z + zeta + nu
    if config.panel == "D":
        X = X0
    else:
        X = config.B_X * np.tanh((X0 - X0.mean()) / X0.std(ddof=1) / config.B_X)
    W = config.B_W * np.tanh(W_raw / config.B_W)
    return GroupDraws(X, Z, zeta, W)


def _outcome_values(config: DgpConfig, g: GroupDraws, U: np.ndarray, sigma: float) -> np.ndarray:
    """Outcomes at quantile levels ``U`` (``(n, m)``) for each group."""
    out = (g.X[:, None] * gamma_curve(U, config.beta_slope) + g.zeta[:, None] * U)
    if sigma:
        out += sigma * base_quantile(U)
    for k in range(1, config.p):
        out += g.W[:, k - 1:k] * control_effect(k, U, config.panel)
    return out


def _design(config: DgpConfig, g: GroupDraws, Y: np.ndarray) -> GroupedDesign:
    X = np.column_stack([g.X, g.W])
    Z = np.column_stack([g.Z, g.W])
    return GroupedDesign(X, Z, Y, config.grid)


def generate_dgp(config: DgpConfig, rep: int) -> tuple[GroupedDesign, TruthCurves]:
    """Simulated grouped design for replication ``rep``.

    Outcome curves are empirical quantiles of ``N`` draws per group, or the
    population quantile curves when ``config.exact_quantiles`` is set.
    Deterministic in ``(config.seed, rep)``.
    """
    cov_rng, out_rng = _streams(config, rep)
    g = _draw_groups(config, cov_rng, config.pi_Z)
    sigma = base_sigma(config)
    if config.exact_quantiles:
        U = np.broadcast_to(config.grid.points, (config.n, len(config.grid)))
        Y = _outcome_values(config, g, U, sigma)
    else:
        # Draw observation-major so a smaller N is a prefix of a larger one.
        U = out_rng.random((config.N, config.n)).T
        Y = empirical_quantiles(_outcome_values(config, g, U, sigma), config.grid)
    return _design(config, g, Y), truth_curves(config)


def quantile_gap_path(config: DgpConfig, rep: int, sizes, reference_size: int,
                      sample_seed: int | None = None) -> np.ndarray:
    """Sup-norm coefficient gaps between fits on nested subsamples.

    For each ``m`` in ``sizes`` the projected coefficients fitted on the first
    ``m`` draws of every group are compared with the fit on all
    ``reference_size`` draws. Group-level covariates come from replication
    ``rep`` and are shared across sizes; ``sample_seed`` redraws only the
    within-group observations.
    """
    full = replace(config, N=int(reference_size), exact_quantiles=False)
    cov_rng, out_rng = _streams(full, rep)
    if sample_seed is not None:
        out_rng = np.random.default_rng([int(config.seed), int(rep), SAMPLE_STREAM, int(sample_seed)])
    g = _draw_groups(full, cov_rng, full.pi_Z)
    U = out_rng.random((full.N, full.n)).T
    vals = _outcome_values(full, g, U, base_sigma(full))
    ref = ivfr_fit(_design(full, g, empirical_quantiles(vals, full.grid))).projected.values
    gaps = []
    for m in sizes:
        fit = ivfr_fit(_design(full, g, empirical_quantiles(vals[:, :int(m)], full.grid)))
        gaps.append(np.max(np.abs(fit.projected.values - ref)))
    return np.array(gaps)


def first_stage_F(X, Z, W=None) -> float:
    """Homoskedastic F statistic of the excluded instrument ``Z``.

    Compares the regression of ``X`` on ``(1, W, Z)`` with the one on ``(1, W)``.
    """
    X = np.asarray(X, dtype=float).ravel()
    Z = np.asarray(Z, dtype=float).reshape(X.size, -1)
    n = X.size
    base = np.ones((n, 1)) if W is None or np.size(W) == 0 else np.column_stack([np.ones(n), W])
    full = np.column_stack([base, Z])

    def rss(A):
        resid = X - A @ np.linalg.lstsq(A, X, rcond=None)[0]
        return float(resid @ resid)

    rss_u = rss(full)
    q = Z.shape[1]
    return ((rss(base) - rss_u) / q) / (rss_u / (n - full.shape[1]))


def _median_F(config: DgpConfig, pi_Z: float, reps: int) -> float:
    Fs = []
    for r in range(reps):
        g = draw_groups(config, r, pi_Z)
        Fs.append(first_stage_F(g.X, g.Z, g.W))
    return float(np.median(Fs))


def calibrate_pi_z(config: DgpConfig, target_F: float, reps: int = 50, rtol: float = 0.02,
                   max_iter: int = 60) -> float:
    """First-stage strength whose median F over ``reps`` pilot replications hits ``target_F``.

    Pilot replications use the same seeds as the real run. Bisection on
    ``log pi_Z`` over ``[0.01, 50]``; the result is accepted when its median F
    lies within 10% of the target.
    """
    if target_F <= 0:
        raise ConfigError("target F must be positive")
    lo, hi = (math.log(b) for b in PI_Z_BOUNDS)
    F_lo, F_hi = _median_F(config, math.exp(lo), reps), _median_F(config, math.exp(hi), reps)
    if not F_lo <= target_F <= F_hi:
        raise CalibrationError(
            f"target F={target_F} outside the reachable range [{F_lo:.3g}, {F_hi:.3g}] for pi_Z in {PI_Z_BOUNDS}")
    best, best_err = math.exp(lo), abs(F_lo / target_F - 1)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        F_mid = _median_F(config, math.exp(mid), reps)
        err = abs(F_mid / target_F - 1)
        if err < best_err:
            best, best_err = math.exp(mid), err
        if err <= rtol:
            break
        if F_mid < target_F:
            lo = mid
        else:
            hi = mid
    if best_err > 0.10:
        raise CalibrationError(f"could not bring the median F within 10% of {target_F}")
    return best


ESTIMATORS = ("unprojected", "projected")


@dataclass
class ReplicationMetrics:
    rep: int
    imse: dict
    w2_sq: dict
    invalid_rate: float
    first_stage_F: float
    imse_check_feasible: bool = False
    covered_pointwise: dict = field(default_factory=dict)  # variant -> (p, Q) flags
    covered_uniform: dict = field(default_factory=dict)  # variant -> (p,) flags
    band_width_uniform: dict = field(default_factory=dict)  # variant -> (p,) widths
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def compute_metrics(fit: IVFRFit, truth: TruthCurves, design: GroupedDesign, bands: dict | None = None,
                    first_stage: float = float("nan")) -> ReplicationMetrics:
    """Per-replication errors, invalid rate and band coverage of the slope curves."""
    grid = design.grid
    if truth.grid != grid:
        raise GridMismatchError("truth and design use different grids")
    slopes = truth.slopes
    target = truth.conditional(design.X)
    imse, w2 = {}, {}
    for name, coeffs, curves in (("unprojected", fit.unprojected, fit.fitted),
                                 ("projected", fit.projected, fit.projected_curves)):
        imse[name] = float(np.sum(grid.integrate((coeffs.values[1:] - slopes) ** 2)))
        w2[name] = float(np.mean(grid.integrate((curves - target) ** 2)))
    reference = truth.coefficients(fit.moments.mu_X)
    feasible = True
    for k in range(1, design.p + 1):
        try:
            diag = fwl_decomposition(design, fit.unprojected, fit.projected, fit.corrections, k, reference)
        except IVFRError:
            feasible = False
            break
        feasible &= diag.feasible and diag.reference_monotone
    m = ReplicationMetrics(-1, imse, w2, fit.invalid_rate, first_stage, bool(feasible))
    for name, b in (bands or {}).items():
        cover_pw = (b.pointwise_lower[1:] <= slopes) & (slopes <= b.pointwise_upper[1:])
        m.covered_pointwise[name] = cover_pw
        if b.uniform_lower is not None:
            inside = (b.uniform_lower[1:] <= slopes) & (slopes <= b.uniform_upper[1:])
            m.covered_uniform[name] = np.all(inside, axis=1)
            m.band_width_uniform[name] = b.uniform_width[1:]
    return m


@dataclass(frozen=True)
class RunSpec:
    config: DgpConfig
    B: int = 0
    alpha: float = 0.05


def run_one(spec: RunSpec, rep: int) -> ReplicationMetrics:
    """Generate, fit, optionally bootstrap, and score one replication."""
    config = spec.config
    try:
        design, truth = generate_dgp(config, rep)
        F = first_stage_F(design.X[:, 0], design.Z[:, 0], design.X[:, 1:])
        fit = ivfr_fit(design)
        bands = None
        if spec.B > 0:
            seed = (int(config.seed), int(rep), BOOT_STREAM)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                bands = {v: multiplier_bootstrap(fit, spec.B, spec.alpha, v, seed=seed)[1] for v in ESTIMATORS}
        m = compute_metrics(fit, truth, design, bands, F)
    except IVFRError as exc:
        m = ReplicationMetrics(rep, {}, {}, float("nan"), float("nan"), error=f"{type(exc).__name__}: {exc}")
    m.rep = rep
    return m


def _run_chunk(args) -> list[ReplicationMetrics]:
    spec, reps = args
    return [run_one(spec, r) for r in reps]


@dataclass
class MonteCarloSummary:
    config: dict
    R: int
    B: int
    alpha: float
    n_failed: int
    failures: list
    imse: dict
    w2_sq: dict
    imse_gain_pct: float
    w2_gain_pct: float
    invalid_rate_mean: float
    invalid_rate_median: float
    median_F: float
    imse_check_feasible_reps: int
    imse_increase_feasible_reps: int
    coverage_pointwise: dict = field(default_factory=dict)
    coverage_uniform: dict = field(default_factory=dict)
    band_width_uniform: dict = field(default_factory=dict)
    delta_width_pct: float | None = None
    share_projected_not_wider: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def table_row(self) -> dict:
        """Flat record with one column per reported statistic."""
        row = {
            "imse_unproj": self.imse["unprojected"], "imse_proj": self.imse["projected"],
            "imse_gain_pct": self.imse_gain_pct,
            "w2_unproj": self.w2_sq["unprojected"], "w2_proj": self.w2_sq["projected"],
            "w2_gain_pct": self.w2_gain_pct,
            "invalid_pct": 100 * self.invalid_rate_mean,
            "invalid_median_pct": 100 * self.invalid_rate_median,
            "median_F": self.median_F, "R": self.R, "B": self.B, "failed": self.n_failed,
        }
        if self.coverage_pointwise:
            for v, tag in (("unprojected", "unproj"), ("projected", "proj")):
                row[f"pw_coverage_{tag}_pct"] = 100 * self.coverage_pointwise[v]
                row[f"ub_coverage_{tag}_pct"] = 100 * self.coverage_uniform[v]
                row[f"ub_width_{tag}"] = self.band_width_uniform[v]
            row["delta_width_pct"] = self.delta_width_pct
            row["share_proj_not_wider"] = self.share_projected_not_wider
        return row


def _gain(unproj: float, proj: float) -> float:
    return 100.0 * (1.0 - proj / unproj) if unproj > 0 else 0.0


def summarize(config: DgpConfig, metrics: list[ReplicationMetrics], B: int, alpha: float) -> MonteCarloSummary:
    ok = [m for m in metrics if not m.failed]
    failures = [{"rep": m.rep, "error": m.error} for m in metrics if m.failed]
    if not ok:
        raise IVFRError("every replication failed")
    imse = {e: float(np.mean([m.imse[e] for m in ok])) for e in ESTIMATORS}
    w2 = {e: float(np.mean([m.w2_sq[e] for m in ok])) for e in ESTIMATORS}
    inv = np.array([m.invalid_rate for m in ok])
    feas = [m for m in ok if m.imse_check_feasible]
    increases = sum(m.imse["projected"] > m.imse["unprojected"] + 1e-10 for m in feas)
    s = MonteCarloSummary(
        config.to_dict(), len(metrics), B, alpha, len(failures), failures, imse, w2,
        _gain(imse["unprojected"], imse["projected"]), _gain(w2["unprojected"], w2["projected"]),
        float(inv.mean()), float(np.median(inv)), float(np.median([m.first_stage_F for m in ok])),
        len(feas), int(increases))
    if B > 0:
        for e in ESTIMATORS:
            # Headline coverage refers to the treatment coefficient.
            s.coverage_pointwise[e] = float(np.mean([m.covered_pointwise[e][0].mean() for m in ok]))
            s.coverage_uniform[e] = float(np.mean([m.covered_uniform[e][0] for m in ok]))
            s.band_width_uniform[e] = float(np.median([m.band_width_uniform[e][0] for m in ok]))
        wu, wp = s.band_width_uniform["unprojected"], s.band_width_uniform["projected"]
        s.delta_width_pct = 100.0 * (wp / wu - 1.0)
        s.share_projected_not_wider = float(np.mean(
            [m.band_width_uniform["projected"][0] <= m.band_width_uniform["unprojected"][0] for m in ok]))
    return s


def run_replications(config: DgpConfig, R: int, B: int = 0, alpha: float = 0.05, workers: int = 1,
                     return_metrics: bool = False):
    """Run ``R`` replications and aggregate them.

    Replications are seeded by ``(config.seed, rep)`` and results are combined
    in replication order, so the summary does not depend on ``workers``.
    Replications that raise a library error are counted and listed, not dropped.
    """
    if R < 1:
        raise ConfigError("need at least one replication")
    spec = RunSpec(config, int(B), float(alpha))
    reps = list(range(R))
    if workers <= 1:
        metrics = [run_one(spec, r) for r in reps]
    else:
        size = max(1, math.ceil(R / (4 * workers)))
        chunks = [(spec, reps[i:i + size]) for i in range(0, R, size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            metrics = [m for part in pool.map(_run_chunk, chunks) for m in part]
    if any(m.failed for m in metrics):
        log.warning("%d of %d replications failed", sum(m.failed for m in metrics), R)
    summary = summarize(config, metrics, B, alpha)
    return (summary, metrics) if return_metrics else summary
