"""Command-line interface: ``ivfr fit``, ``ivfr simulate`` and ``ivfr bench``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import PRESET_SIZES, run_bench
from .errors import ConfigError, IVFRError, ValidationError
from .estimator import compute_moments, ivfr_fit
from .inference import multiplier_bootstrap, pointwise_band, sandwich_variance, score_matrix
from .io import (
    PLOT_COLUMNS,
    DatasetFiles,
    ResultBundle,
    atomic_write,
    bands_to_dict,
    csv_text,
    parse_dataset,
    read_config_file,
    run_config_from,
)
from .quantile_core import build_grid
from .simulation import DgpConfig, calibrate_pi_z, first_stage_F, run_replications

log = logging.getLogger("ivfr")


def _run_config(args):
    values = read_config_file(args.config) if args.config else {}
    overrides = {"grid": args.grid, "alpha": args.alpha, "bootstrap_B": args.bootstrap,
                 "bootstrap_variant": getattr(args, "variant", None),
                 "cluster_column": getattr(args, "cluster", None),
                 "weight_column": getattr(args, "weight", None),
                 "seed": args.seed, "output_path": args.out}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return run_config_from(values)


def _coeff_dict(c) -> dict:
    return {"values": c.values.tolist(), "mu_X": c.mu_X.tolist(), "raw_intercept": c.raw_intercept().tolist()}


def build_bundle(parsed, config, excluded: str | None = None) -> ResultBundle:
    design = parsed.design
    moments = compute_moments(design)
    fit = ivfr_fit(design, moments)
    cluster = design.cluster
    bands, kernels = {}, {}
    for variant, coeffs in (("unprojected", fit.unprojected), ("projected", fit.projected)):
        kernels[variant] = sandwich_variance(score_matrix(design, coeffs), moments, cluster)
        bands[f"sandwich_{variant}"] = bands_to_dict(pointwise_band(coeffs, kernels[variant], config.alpha, design.n))
    if config.bootstrap_B > 0:
        variants = ("unprojected", "projected") if config.bootstrap_variant == "both" else (config.bootstrap_variant,)
        for variant in variants:
            _, b = multiplier_bootstrap(fit, config.bootstrap_B, config.alpha, variant, cluster=cluster,
                                        seed=config.seed, kernels=kernels)
            bands[f"bootstrap_{variant}"] = bands_to_dict(b)
    diagnostics = {
        "n": design.n, "p": design.p, "l": design.l,
        "cond_ZZ": moments.cond_ZZ, "cond_XX": moments.cond_XX, "cond_rank": moments.cond_rank,
        "dropped_groups": parsed.dropped, "group_ids": parsed.group_ids,
    }
    if excluded is not None:
        k = int(excluded.lstrip("z")) - 1
        if not 0 <= k < design.l:
            raise ConfigError(f"excluded instrument {excluded!r} is not one of z1..z{design.l}")
        others = np.delete(design.Z, k, axis=1)
        diagnostics["first_stage_F"] = first_stage_F(design.X[:, 0], design.Z[:, k], others)
        diagnostics["excluded_instrument"] = excluded
    grid = design.grid
    return ResultBundle(
        grid={"a": grid.a, "b": grid.b, "points": grid.points.tolist()},
        coefficients={"unprojected": _coeff_dict(fit.unprojected), "projected": _coeff_dict(fit.projected)},
        bands=bands, invalid_rate=fit.invalid_rate, diagnostics=diagnostics, config=config.to_dict())


def cmd_fit(args) -> int:
    config = _run_config(args)
    parsed = parse_dataset(DatasetFiles(args.groups, args.micro), config)
    bundle = build_bundle(parsed, config, args.excluded_instrument)
    out = Path(config.output_path)
    atomic_write(out / "result.json", bundle.to_json())
    for variant in ("unprojected", "projected"):
        atomic_write(out / f"plot_{variant}.csv", csv_text(bundle.plot_rows(variant), PLOT_COLUMNS))
    log.info("wrote results to %s", out)
    return 0


def _dgp_config(args, run) -> DgpConfig:
    kw = dict(panel=args.panel, n=args.n, N=args.N, p=args.p, delta=args.delta, beta_slope=args.beta_slope,
              grid=build_grid(*run.grid), seed=run.seed, exact_quantiles=args.exact_quantiles)
    if args.pi_z is not None:
        kw["pi_Z"] = args.pi_z
    if args.sigma is not None:
        kw["sigma"] = args.sigma
    return DgpConfig(**kw)


def cmd_simulate(args) -> int:
    run = _run_config(args)
    cfg = _dgp_config(args, run)
    calibrated = None
    if args.target_f is not None:
        calibrated = calibrate_pi_z(cfg, args.target_f, reps=args.calibration_reps)
        cfg = replace(cfg, pi_Z=calibrated)
    summary = run_replications(cfg, args.reps, run.bootstrap_B, run.alpha, workers=args.workers)
    record = summary.to_dict()
    record["target_F"] = args.target_f
    record["calibrated_pi_Z"] = calibrated
    record["library_version"] = __version__
    out = Path(run.output_path)
    atomic_write(out / "summary.json", json.dumps(record, sort_keys=True, indent=2) + "\n")
    row = summary.table_row()
    row["pi_Z"] = cfg.pi_Z
    atomic_write(out / "summary.csv", csv_text([row], list(row)))
    print(json.dumps(row, sort_keys=True))
    return 0


def _parse_sizes(text: str):
    try:
        return [tuple(int(v) for v in s.lower().split("x")) for s in text.split(",")]
    except ValueError:
        raise ConfigError(f"sizes must look like 50x50,500x1000; got {text!r}") from None


def cmd_bench(args) -> int:
    sizes = _parse_sizes(args.sizes) if args.sizes else PRESET_SIZES
    report = run_bench(sizes, args.runs, args.seed or 0)
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if args.out:
        atomic_write(Path(args.out) / "bench.json", text)
    sys.stdout.write(text)
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--grid", help="quantile grid as a,b,Q (default 0.05,0.95,19)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--bootstrap", type=int, metavar="B", help="multiplier bootstrap draws (0 disables)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivfr", description="IV Frechet regression for quantile-function outcomes")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="estimate coefficient curves and confidence bands")
    _common(fit)
    fit.add_argument("--groups", required=True, help="group-level CSV (group_id, x1.., z1.., optional q_<u>)")
    fit.add_argument("--micro", help="individual-level CSV (group_id, y)")
    fit.add_argument("--variant", choices=("unprojected", "projected", "both"))
    fit.add_argument("--cluster", help="cluster id column of the group file")
    fit.add_argument("--weight", help="group weight column of the group file")
    fit.add_argument("--excluded-instrument", help="instrument column (e.g. z1) for the first-stage F")
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="Monte Carlo study of the estimators")
    _common(sim)
    sim.add_argument("--panel", default="A")
    sim.add_argument("--n", type=int, default=50)
    sim.add_argument("--N", type=int, default=50)
    sim.add_argument("--p", type=int, default=1)
    sim.add_argument("--delta", type=float, default=0.0)
    sim.add_argument("--beta-slope", type=float, default=0.0)
    sim.add_argument("--pi-z", type=float)
    sim.add_argument("--sigma", type=float, help="fix the base scale instead of the analytic rule")
    sim.add_argument("--target-f", type=float, help="calibrate pi_Z to this median first-stage F")
    sim.add_argument("--calibration-reps", type=int, default=100)
    sim.add_argument("--reps", type=int, default=100, metavar="R")
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--exact-quantiles", action="store_true",
                     help="use population group quantiles instead of empirical ones")
    sim.set_defaults(func=cmd_simulate)

    bench = sub.add_parser("bench", help="time the cross-grid solve against a per-quantile loop")
    bench.add_argument("--sizes", help="comma separated nxN pairs, e.g. 50x50,500x1000")
    bench.add_argument("--runs", type=int, default=10)
    bench.add_argument("--seed", type=int)
    bench.add_argument("--out", help="directory for bench.json")
    bench.set_defaults(func=cmd_bench)
    return parser


def _error_payload(exc: Exception, code: int) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IVFRError as exc:
        sys.stderr.write(_error_payload(exc, exc.exit_code) + "\n")
        return exc.exit_code
    except (OSError, ValueError) as exc:
        code = ValidationError.exit_code
        sys.stderr.write(_error_payload(exc, code) + "\n")
        return code
    except ArithmeticError as exc:
        sys.stderr.write(_error_payload(exc, 3) + "\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
