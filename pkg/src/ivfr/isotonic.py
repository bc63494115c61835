"""Monotone L2 projection of quantile curves by pool-adjacent-violators."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import InvalidWeightError, NonFiniteInputError, OracleScaleError
from .quantile_core import QuantileCurve

ORACLE_MAX_LENGTH = 16


@dataclass(frozen=True)
class ProjectionResult:
    projected: QuantileCurve
    correction_sup_norm: float
    was_active: bool


def _check_weights(weights, length: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (length,):
        raise InvalidWeightError(f"expected {length} weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise InvalidWeightError("projection weights must be finite and strictly positive")
    return w


def pava(y, w) -> np.ndarray:
    """Weighted isotonic regression of the sequence ``y``.

    Minimizes ``sum_i w_i (y_i - h_i)**2`` over non-decreasing ``h``. Adjacent
    blocks are pooled only on a strict violation, so ties and monotone input
    come back unchanged.
    """
    y = [float(v) for v in y]
    w = [float(v) for v in w]
    sums, wsums, sizes = [], [], []
    for yi, wi in zip(y, w):
        s, ws, c = yi * wi, wi, 1
        while sums and sums[-1] * ws > s * wsums[-1]:
            s += sums.pop()
            ws += wsums.pop()
            c += sizes.pop()
        sums.append(s)
        wsums.append(ws)
        sizes.append(c)
    out = np.empty(len(y))
    start = 0
    for s, ws, c in zip(sums, wsums, sizes):
        out[start:start + c] = s / ws
        start += c
    return out


def project_rows(values, weights) -> tuple[np.ndarray, np.ndarray]:
    """Project every row (last axis) of ``values`` onto the monotone cone.

    Returns the projected array and a boolean mask of rows where the
    projection was active. Rows that are already non-decreasing are copied
    through untouched.
    """
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise NonFiniteInputError("cannot project curves containing NaN or inf")
    w = _check_weights(weights, values.shape[-1])
    flat = values.reshape(-1, values.shape[-1])
    active = np.any(np.diff(flat, axis=1) < 0, axis=1)
    out = flat.copy()
    for i in np.flatnonzero(active):
        out[i] = pava(flat[i], w)
    return out.reshape(values.shape), active.reshape(values.shape[:-1])


def project_monotone(curve: QuantileCurve, weights=None) -> ProjectionResult:
    """L2 projection of ``curve`` onto non-decreasing functions on its grid.

    The default weights are the trapezoid quadrature weights of the grid, so
    the discrete problem approximates the projection in ``L2[a, b]``.
    """
    w = curve.grid.weights if weights is None else weights
    projected, active = project_rows(curve.values[None, :], w)
    correction = float(np.max(np.abs(projected[0] - curve.values)))
    return ProjectionResult(QuantileCurve(curve.grid, projected[0]), correction, bool(active[0]))


def qp_oracle_project(curve: QuantileCurve, weights=None) -> QuantileCurve:
    """Exact weighted isotonic fit by exhaustive search over ordered partitions.

    Every isotonic solution is constant on contiguous blocks equal to the
    block's weighted mean, so enumerating all 2**(Q-1) block partitions with
    non-decreasing block means and keeping the cheapest is exact. Only meant
    as a test oracle for short grids.
    """
    y = np.asarray(curve.values, dtype=float)
    Q = y.size
    if Q > ORACLE_MAX_LENGTH:
        raise OracleScaleError(f"oracle limited to {ORACLE_MAX_LENGTH} points, got {Q}")
    w = np.ones(Q) if weights is None else _check_weights(weights, Q)
    best, best_cost = None, np.inf
    for cuts in product((False, True), repeat=Q - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [Q]
        means = [np.dot(w[s:e], y[s:e]) / w[s:e].sum() for s, e in zip(bounds[:-1], bounds[1:])]
        if any(m1 > m2 for m1, m2 in zip(means[:-1], means[1:])):
            continue
        fit = np.repeat(means, np.diff(bounds))
        cost = float(np.dot(w, (y - fit) ** 2))
        if cost < best_cost:
            best, best_cost = fit, cost
    return QuantileCurve(curve.grid, best)
