"""Configuration files, CSV ingestion and result serialization."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import re
import tempfile
import warnings
from dataclasses import dataclass, field, fields
from io import StringIO
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DatasetError
from .estimator import GroupedDesign
from .inference import ConfidenceBands
from .quantile_core import GroupSample, QuantileGrid, build_grid, empirical_quantile

log = logging.getLogger(__name__)

BOOT_VARIANTS = ("unprojected", "projected", "both")
_XCOL = re.compile(r"^x(\d+)$")
_ZCOL = re.compile(r"^z(\d+)$")
_QCOL = re.compile(r"^q_(.+)$")


class GrowthWarning(UserWarning):
    """Many groups relative to the smallest within-group sample."""


@dataclass
class RunConfig:
    grid: tuple = (0.05, 0.95, 19)
    alpha: float = 0.05
    bootstrap_B: int = 0
    bootstrap_variant: str = "both"
    cluster_column: str | None = None
    weight_column: str | None = None
    seed: int = 0
    output_path: str = "ivfr_out"
    growth_warning_ratio: float = 1.0
    min_group_size: int = 1

    def __post_init__(self):
        if isinstance(self.grid, str):
            self.grid = parse_grid_spec(self.grid)
        a, b, Q = self.grid
        self.grid = (float(a), float(b), int(Q))
        self.alpha = float(self.alpha)
        self.bootstrap_B = int(self.bootstrap_B)
        self.seed = int(self.seed)
        self.growth_warning_ratio = float(self.growth_warning_ratio)
        self.min_group_size = int(self.min_group_size)
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.bootstrap_B < 0:
            raise ConfigError("bootstrap_B must be non-negative (0 disables the bootstrap)")
        if self.bootstrap_variant not in BOOT_VARIANTS:
            raise ConfigError(f"bootstrap_variant must be one of {BOOT_VARIANTS}")
        if self.min_group_size < 1:
            raise ConfigError("min_group_size must be at least 1")

    def build_grid(self) -> QuantileGrid:
        return build_grid(*self.grid)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["grid"] = list(self.grid)
        return d


def parse_grid_spec(text: str) -> tuple:
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 3:
        raise ConfigError(f"grid must be given as a,b,Q; got {text!r}")
    try:
        return float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as exc:
        raise ConfigError(f"cannot parse grid {text!r}") from exc


def read_config_file(path) -> dict:
    """Flat ``key = value`` text; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def run_config_from(values: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    if "alpha" not in values:
        log.info("alpha not configured; using the default 0.05")
    clean = {k: (None if v in ("", "none", "None") else v) for k, v in values.items()}
    return RunConfig(**{k: v for k, v in clean.items() if v is not None})


@dataclass(frozen=True)
class DatasetFiles:
    group_file: str
    micro_file: str | None = None

    @property
    def mode(self) -> str:
        return "micro" if self.micro_file else "prequantiled"


@dataclass
class ParsedDataset:
    design: GroupedDesign
    group_ids: list
    dropped: list = field(default_factory=list)
    group_sizes: list | None = None


def _read_csv(path) -> tuple[list, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file, a header row is required") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    for i, r in enumerate(rows, 2):
        if len(r) != len(header):
            raise DatasetError(f"{path}: line {i} has {len(r)} fields, header has {len(header)}")
    return header, rows


def _number(value: str, path, line: int, col: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise DatasetError(f"{path}: line {line}, column {col!r}: non-numeric value {value!r}") from None
    if not math.isfinite(x):
        raise DatasetError(f"{path}: line {line}, column {col!r}: non-finite value {value!r}")
    return x


def _indexed_columns(header, pattern) -> list[int]:
    found = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := pattern.match(h)))
    if [k for k, _ in found] != list(range(1, len(found) + 1)):
        raise DatasetError(f"columns matching {pattern.pattern} must be numbered 1..k without gaps")
    return [i for _, i in found]


def parse_dataset(files: DatasetFiles, config: RunConfig) -> ParsedDataset:
    """Read a group file plus either a micro file or embedded ``q_<u>`` columns."""
    grid = config.build_grid()
    path = files.group_file
    header, rows = _read_csv(path)
    if "group_id" not in header:
        raise DatasetError(f"{path}: missing group_id column")
    gid_col = header.index("group_id")
    xcols = _indexed_columns(header, _XCOL)
    zcols = _indexed_columns(header, _ZCOL)
    if not xcols or not zcols:
        raise DatasetError(f"{path}: need at least one x<k> and one z<k> column")
    qcols = [(i, h) for i, h in enumerate(header) if _QCOL.match(h)]
    if files.micro_file and qcols:
        raise DatasetError("supply either a micro file or q_<u> columns, not both")
    if not files.micro_file and not qcols:
        raise DatasetError("no outcome data: supply a micro file or q_<u> columns in the group file")

    def optional(col):
        if col is None:
            return None
        if col not in header:
            raise DatasetError(f"{path}: configured column {col!r} not found")
        return header.index(col)

    wcol, ccol = optional(config.weight_column), optional(config.cluster_column)
    ids, X, Z, W, C = [], [], [], [], []
    seen = set()
    for line, r in enumerate(rows, 2):
        gid = r[gid_col].strip()
        if gid in seen:
            raise DatasetError(f"{path}: duplicate group_id {gid!r} at line {line}")
        seen.add(gid)
        ids.append(gid)
        X.append([_number(r[i], path, line, header[i]) for i in xcols])
        Z.append([_number(r[i], path, line, header[i]) for i in zcols])
        if wcol is not None:
            W.append(_number(r[wcol], path, line, header[wcol]))
        if ccol is not None:
            C.append(r[ccol].strip())

    sizes = None
    if qcols:
        levels = []
        for _, h in qcols:
            try:
                levels.append(float(_QCOL.match(h).group(1)))
            except ValueError:
                raise DatasetError(f"{path}: cannot read a quantile level from column {h!r}") from None
        if len(levels) != len(grid) or not np.allclose(levels, grid.points, rtol=0, atol=1e-9):
            raise DatasetError(f"{path}: q_<u> columns {levels} do not match the configured grid "
                               f"{grid.points.tolist()}")
        Y = np.array([[_number(r[i], path, line, header[i]) for i, _ in qcols]
                      for line, r in enumerate(rows, 2)])
        for j, y in enumerate(Y):
            if np.any(np.diff(y) < 0):
                raise DatasetError(f"{path}: quantiles of group {ids[j]!r} (line {j + 2}) are not non-decreasing")
        keep = list(range(len(ids)))
        dropped = []
    else:
        Y, keep, dropped, sizes = _micro_quantiles(files.micro_file, ids, grid, config.min_group_size)

    if dropped:
        log.warning("dropped %d groups with fewer than %d observations", len(dropped), config.min_group_size)
    idx = np.array(keep, dtype=int)
    design = GroupedDesign(
        np.array(X)[idx], np.array(Z)[idx], Y, grid,
        np.array(W)[idx] if W else None,
        np.array(C, dtype=object)[idx] if C else None,
    )
    if sizes is not None:
        ratio = design.n / min(sizes)
        if ratio > config.growth_warning_ratio:
            warnings.warn(f"n / min group size = {ratio:.3g} exceeds {config.growth_warning_ratio}: "
                          "within-group quantile noise may not be negligible", GrowthWarning, stacklevel=2)
    return ParsedDataset(design, [ids[i] for i in keep], [ids[i] for i in dropped] if dropped else [], sizes)


def _micro_quantiles(path, ids, grid, min_size):
    header, rows = _read_csv(path)
    for col in ("group_id", "y"):
        if col not in header:
            raise DatasetError(f"{path}: missing {col} column")
    gi, yi = header.index("group_id"), header.index("y")
    obs = {g: [] for g in ids}
    for line, r in enumerate(rows, 2):
        gid = r[gi].strip()
        if gid not in obs:
            raise DatasetError(f"{path}: line {line}: unknown group_id {gid!r}")
        obs[gid].append(_number(r[yi], path, line, "y"))
    keep, dropped, curves, sizes = [], [], [], []
    for j, g in enumerate(ids):
        if len(obs[g]) < min_size:
            dropped.append(j)
            continue
        keep.append(j)
        sizes.append(len(obs[g]))
        curves.append(empirical_quantile(GroupSample(np.array(obs[g])), grid).values)
    if not keep:
        raise DatasetError("no group has enough observations")
    return np.array(curves), keep, dropped, sizes


def bands_to_dict(b: ConfidenceBands) -> dict:
    d = {"level": b.level, "variant": b.variant,
         "pointwise_lower": b.pointwise_lower.tolist(), "pointwise_upper": b.pointwise_upper.tolist()}
    if b.uniform_lower is not None:
        d.update(uniform_lower=b.uniform_lower.tolist(), uniform_upper=b.uniform_upper.tolist(),
                 critical_values=b.critical_values.tolist())
    return d


@dataclass
class ResultBundle:
    """Everything a fit produces, in a JSON-friendly layout."""

    grid: dict
    coefficients: dict
    bands: dict
    invalid_rate: float
    diagnostics: dict
    config: dict
    library_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ResultBundle":
        return cls(**json.loads(text))

    def plot_rows(self, variant: str) -> list[dict]:
        """Rows ``(coefficient, u, estimate, pw_lo, pw_hi, unif_lo, unif_hi)``."""
        coeffs = np.array(self.coefficients[variant]["values"])
        pw = self.bands.get(f"sandwich_{variant}")
        ub = self.bands.get(f"bootstrap_{variant}")
        rows = []
        for k in range(coeffs.shape[0]):
            name = "intercept" if k == 0 else f"x{k}"
            for q, u in enumerate(self.grid["points"]):
                rows.append({
                    "coefficient": name, "u": u, "estimate": coeffs[k, q],
                    "pw_lo": pw["pointwise_lower"][k][q] if pw else "",
                    "pw_hi": pw["pointwise_upper"][k][q] if pw else "",
                    "unif_lo": ub["uniform_lower"][k][q] if ub else "",
                    "unif_hi": ub["uniform_upper"][k][q] if ub else "",
                })
        return rows


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(rows: list[dict], columns: list[str]) -> str:
    buf = StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})
    return buf.getvalue()


PLOT_COLUMNS = ["coefficient", "u", "estimate", "pw_lo", "pw_hi", "unif_lo", "unif_hi"]
