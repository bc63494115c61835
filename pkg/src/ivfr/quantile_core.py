"""Quantile grids, quantile curves, empirical quantiles and W2 distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyGroupError, GridMismatchError, InvalidGridError, NonFiniteInputError


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class QuantileGrid:
    """Ordered quantile levels inside ``[a, b]`` with ``0 < a`` and ``b < 1``."""

    points: np.ndarray
    a: float
    b: float

    def __post_init__(self):
        pts = _frozen(self.points)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))
        if pts.ndim != 1 or pts.size < 2:
            raise InvalidGridError("a quantile grid needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise InvalidGridError("grid points must be finite")
        if not np.all(np.diff(pts) > 0):
            raise InvalidGridError("grid points must be strictly increasing")
        if not (0.0 < self.a <= pts[0] and pts[-1] <= self.b < 1.0):
            raise InvalidGridError(
                f"grid must satisfy 0 < a <= u_1 and u_Q <= b < 1, got a={self.a}, b={self.b}"
            )

    def __len__(self) -> int:
        return self.points.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantileGrid):
            return NotImplemented
        return self.a == other.a and self.b == other.b and np.array_equal(self.points, other.points)

    def __hash__(self) -> int:
        return hash((self.a, self.b, self.points.tobytes()))

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights; they sum to ``u_Q - u_1``."""
        return trapezoid_weights(self.points)

    def integrate(self, values) -> np.ndarray:
        """Trapezoid integral over the last axis of ``values``."""
        return np.asarray(values, dtype=float) @ self.weights


def trapezoid_weights(points) -> np.ndarray:
    u = np.asarray(points, dtype=float)
    h = np.diff(u)
    w = np.zeros_like(u)
    w[:-1] += h / 2.0
    w[1:] += h / 2.0
    return w


def build_grid(a: float, b: float, Q: int) -> QuantileGrid:
    """Q equally spaced quantile levels from ``a`` to ``b`` inclusive."""
    if int(Q) != Q or Q < 2:
        raise InvalidGridError(f"need Q >= 2 grid points, got {Q}")
    if not (0.0 < a < 1.0 and 0.0 < b < 1.0):
        raise InvalidGridError(f"grid bounds must lie in (0, 1), got a={a}, b={b}")
    if a >= b:
        raise InvalidGridError(f"need a < b for a grid with {Q} points, got a={a}, b={b}")
    # Rounding keeps levels such as 0.15 identical to their decimal literal,
    # which the q_<u> column names of prequantiled CSVs rely on.
    pts = np.round(np.linspace(a, b, int(Q)), 12)
    pts[0], pts[-1] = a, b
    return QuantileGrid(pts, a, b)


@dataclass(frozen=True, eq=False)
class QuantileCurve:
    """A real function tabulated on a quantile grid.

    Monotonicity is not enforced: fitted IV-weighted curves may legitimately
    decrease, see :attr:`is_monotone`.
    """

    grid: QuantileGrid
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        object.__setattr__(self, "values", vals)
        if vals.shape != (len(self.grid),):
            raise GridMismatchError(
                f"curve has {vals.size} values but the grid has {len(self.grid)} points"
            )

    @property
    def is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.values) >= 0))

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class GroupSample:
    """Raw within-group draws ``V_j1, ..., V_jm``."""

    observations: np.ndarray

    def __post_init__(self):
        obs = _frozen(np.ravel(self.observations))
        if obs.size == 0:
            raise EmptyGroupError("a group sample needs at least one observation")
        if not np.all(np.isfinite(obs)):
            raise NonFiniteInputError("group observations must be finite")
        object.__setattr__(self, "observations", obs)

    @property
    def m(self) -> int:
        return self.observations.size


def order_statistic_index(u, m: int) -> np.ndarray:
    """Zero-based index of the smallest order statistic whose ECDF level is >= u."""
    levels = np.arange(1, m + 1) / m
    return np.searchsorted(levels, np.asarray(u, dtype=float), side="left")


def empirical_quantile(sample: GroupSample | np.ndarray, grid: QuantileGrid) -> QuantileCurve:
    """Left-continuous inverse of the empirical CDF, ``inf{y : F_m(y) >= u}``."""
    if not isinstance(sample, GroupSample):
        sample = GroupSample(sample)
    ordered = np.sort(sample.observations)
    return QuantileCurve(grid, ordered[order_statistic_index(grid.points, sample.m)])


def empirical_quantiles(samples: np.ndarray, grid: QuantileGrid) -> np.ndarray:
    """Row-wise :func:`empirical_quantile` for an ``(n, m)`` array of equal-size samples."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] == 0:
        raise EmptyGroupError("expected an (n, m) array with m >= 1")
    if not np.all(np.isfinite(samples)):
        raise NonFiniteInputError("group observations must be finite")
    idx = order_statistic_index(grid.points, samples.shape[1])
    return np.sort(samples, axis=1)[:, idx]


def _check_same_grid(c1: QuantileCurve, c2: QuantileCurve) -> None:
    if c1.grid != c2.grid:
        raise GridMismatchError("curves live on different quantile grids")


def w2_squared(c1: QuantileCurve, c2: QuantileCurve) -> float:
    """Squared 2-Wasserstein distance by the trapezoid rule on the shared grid."""
    _check_same_grid(c1, c2)
    return float(c1.grid.integrate((c1.values - c2.values) ** 2))
