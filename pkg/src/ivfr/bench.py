"""Timing of the cross-grid 2SLS solve against a per-quantile regression loop."""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import dataclass, replace

import numpy as np

from .estimator import GroupedDesign, compute_moments, unconstrained_fit
from .simulation import DgpConfig, generate_dgp

PRESET_SIZES = ((50, 50), (100, 100), (500, 1000))
MIN_RUNS = 10
GATE_TOL = 1e-10


def per_quantile_2sls(design: GroupedDesign) -> np.ndarray:
    """Deliberately naive baseline: a full two-stage regression at every grid point.

    Both stages are solved by least squares with an explicit intercept, once
    per quantile level, without sharing anything across levels.
    """
    n, Q = design.Y.shape
    ones = np.ones((n, 1))
    out = np.empty((design.p + 1, Q))
    for q in range(Q):
        Zfull = np.hstack([ones, design.Z])
        first = np.linalg.lstsq(Zfull, design.X, rcond=None)[0]
        Xhat = np.hstack([ones, Zfull @ first])
        coef = np.linalg.lstsq(Xhat, design.Y[:, q], rcond=None)[0]
        out[1:, q] = coef[1:]
        out[0, q] = coef[0] + design.X.mean(axis=0) @ coef[1:]
    return out


def vectorized_2sls(design: GroupedDesign) -> np.ndarray:
    return unconstrained_fit(design, compute_moments(design)).values


@dataclass(frozen=True)
class BenchResult:
    n: int
    N: int
    Q: int
    runs: int
    vectorized_ms: float
    loop_ms: float
    max_abs_diff: float

    @property
    def speedup(self) -> float:
        return self.loop_ms / self.vectorized_ms

    def to_dict(self) -> dict:
        return {"n": self.n, "N": self.N, "Q": self.Q, "runs": self.runs,
                "vectorized_ms": self.vectorized_ms, "loop_ms": self.loop_ms,
                "speedup": self.speedup, "max_abs_diff": self.max_abs_diff}


def _median_ms(fn, design, runs: int) -> float:
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn(design)
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def machine_descriptor() -> dict:
    return {"platform": platform.platform(), "processor": platform.processor() or platform.machine(),
            "python": platform.python_version(), "numpy": np.__version__, "cpu_count": os.cpu_count()}


def bench_size(n: int, N: int, runs: int = MIN_RUNS, seed: int = 0, config: DgpConfig | None = None) -> BenchResult:
    """Time both solvers on one simulated panel-D design after checking they agree."""
    runs = max(int(runs), MIN_RUNS)
    base = config or DgpConfig(panel="D")
    design, _ = generate_dgp(replace(base, n=n, N=N, seed=seed), 0)
    diff = float(np.max(np.abs(vectorized_2sls(design) - per_quantile_2sls(design))))
    if not diff <= GATE_TOL:
        raise ArithmeticError(f"vectorized and per-quantile solutions differ by {diff:.3g}")
    vec = _median_ms(vectorized_2sls, design, runs)
    loop = _median_ms(per_quantile_2sls, design, runs)
    return BenchResult(n, N, len(design.grid), runs, vec, loop, diff)


def run_bench(sizes=PRESET_SIZES, runs: int = MIN_RUNS, seed: int = 0) -> dict:
    results = [bench_size(n, N, runs, seed).to_dict() for n, N in sizes]
    return {"machine": machine_descriptor(), "runs": max(int(runs), MIN_RUNS), "results": results}
