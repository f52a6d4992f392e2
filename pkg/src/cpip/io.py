"""Policy config and data file parsing, plus deterministic CSV writing."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .nuisance import DEFAULT_FLOOR, DEFAULT_FOLDS, DataError, Dataset
from .tilt import ActionSpace, CostSpec, TiltConfig


class ConfigError(ValueError):
    pass


_NUMBER = {"type": "number"}
CONFIG_SCHEMA = {
    "type": "object",
    "required": ["nu", "cost"],
    "additionalProperties": False,
    "properties": {
        "actions": {"type": "array", "items": {"type": ["string", "integer"]}, "minItems": 2},
        "nu": {"type": "array", "items": _NUMBER, "minItems": 2},
        "cost": {
            "oneOf": [
                {"type": "array", "items": _NUMBER},
                {"type": "array", "items": {"type": "array", "items": _NUMBER}},
            ]
        },
        "delta": {
            "oneOf": [
                _NUMBER,
                {"type": "array", "items": _NUMBER, "minItems": 1},
                {
                    "type": "object",
                    "required": ["min", "max", "points"],
                    "additionalProperties": False,
                    "properties": {
                        "min": _NUMBER,
                        "max": _NUMBER,
                        "points": {"type": "integer", "minimum": 1},
                    },
                },
            ]
        },
        "options": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k_folds": {"type": "integer", "minimum": 2},
                "B": {"type": "integer", "minimum": 100},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "prop_floor": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "positivity_threshold": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "action": {"type": "string"},
                "outcome": {"type": "string"},
                "covariates": {"type": "array", "items": {"type": "string"}},
                "adjust": {"type": "array", "items": {"type": "string"}},
            },
        },
    },
}


@dataclass
class PolicyConfig:
    tilt: TiltConfig
    actions: ActionSpace
    k_folds: int = DEFAULT_FOLDS
    B: int = 1000
    alpha: float = 0.05
    seed: int = 0
    prop_floor: float = DEFAULT_FLOOR
    positivity_threshold: float = 100.0
    data: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _line_of(text: str, path) -> int | None:
    """Best-effort line number of the key at the head of a JSON path."""
    keys = [p for p in path if isinstance(p, str)]
    if not keys:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(keys[-1]), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _fail(text: str, path, msg: str):
    field_name = ".".join(str(p) for p in path) or "<root>"
    line = _line_of(text, path)
    where = f" (line {line})" if line else ""
    raise ConfigError(f"config field '{field_name}'{where}: {msg}")


def delta_grid_from(spec) -> np.ndarray:
    if isinstance(spec, dict):
        return np.linspace(spec["min"], spec["max"], spec["points"])
    return np.atleast_1d(np.asarray(spec, dtype=float))


def parse_config(text: str) -> PolicyConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON (line {exc.lineno}): {exc.msg}") from None
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        _fail(text, list(err.absolute_path), err.message)

    nu = np.asarray(raw["nu"], dtype=float)
    K = len(nu)
    if np.any(nu < 0):
        _fail(text, ["nu"], "entries must be nonnegative")
    if abs(nu.sum() - 1.0) > 1e-9:
        _fail(text, ["nu"], f"entries must sum to 1 (got {nu.sum():.12g})")
    nu = nu / nu.sum()
    labels = raw.get("actions", [str(k) for k in range(K)])
    if len(labels) != K:
        _fail(text, ["actions"], f"expected {K} labels to match nu")
    try:
        actions = ActionSpace(tuple(labels))
    except ValueError as exc:
        _fail(text, ["actions"], str(exc))
    cost = np.asarray(raw["cost"], dtype=float)
    if cost.ndim == 1 and cost.shape != (K,):
        _fail(text, ["cost"], f"destination costs need {K} entries")
    if cost.ndim == 2 and cost.shape != (K, K):
        _fail(text, ["cost"], f"cost matrix must be {K}x{K}")
    if np.any(cost < 0):
        _fail(text, ["cost"], "costs must be nonnegative")
    cost_spec = CostSpec.destination(cost) if cost.ndim == 1 else CostSpec.matrix(cost)
    grid = delta_grid_from(raw.get("delta", 0.0))
    if np.any(np.diff(grid) <= 0):
        _fail(text, ["delta"], "delta values must be strictly increasing")
    opts = raw.get("options", {})
    return PolicyConfig(
        tilt=TiltConfig(nu, cost_spec, grid),
        actions=actions,
        k_folds=opts.get("k_folds", DEFAULT_FOLDS),
        B=opts.get("B", 1000),
        alpha=opts.get("alpha", 0.05),
        seed=opts.get("seed", 0),
        prop_floor=opts.get("prop_floor", DEFAULT_FLOOR),
        positivity_threshold=opts.get("positivity_threshold", 100.0),
        data=raw.get("data", {}),
        raw=raw,
    )


def load_config(path) -> PolicyConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def _uncommented(lines):
    return (line for line in lines if not line.startswith("#"))


def read_data(path, actions: ActionSpace, spec: dict | None = None) -> Dataset:
    """Read a CSV with covariate columns, one action column and one outcome column.

    Actions may be given as labels from ``actions`` or as integer indices.
    """
    spec = spec or {}
    a_col, y_col = spec.get("action", "A"), spec.get("outcome", "Y")
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(_uncommented(fh))
            header = next(reader, None)
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read data {path}: {exc.strerror}") from None
    if not header:
        raise DataError("data file has no header")
    header = [h.strip() for h in header]
    for col in (a_col, y_col):
        if col not in header:
            raise DataError(f"data file lacks column {col!r}")
    covs = spec.get("covariates") or [h for h in header if h not in (a_col, y_col)]
    missing = [c for c in covs if c not in header]
    if missing:
        raise DataError(f"data file lacks covariate columns {missing}")
    if not covs:
        raise DataError("data file has no covariate columns")
    adjust = spec.get("adjust")
    if adjust is not None:
        bad = [c for c in adjust if c not in covs]
        if bad:
            raise DataError(f"adjustment columns {bad} are not covariates")
        adjust_idx = tuple(covs.index(c) for c in adjust)
    else:
        adjust_idx = None
    pos = {h: i for i, h in enumerate(header)}
    W, A, Y = [], [], []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"data row {lineno} has {len(row)} fields, expected {len(header)}")
        try:
            W.append([float(row[pos[c]]) for c in covs])
            Y.append(float(row[pos[y_col]]))
        except ValueError:
            raise DataError(f"data row {lineno} has a non-numeric value") from None
        raw_a = row[pos[a_col]].strip()
        if raw_a in actions.labels:
            A.append(actions.index(raw_a))
        else:
            try:
                A.append(int(raw_a))
            except ValueError:
                raise DataError(f"data row {lineno}: unknown action {raw_a!r}") from None
    if not W:
        raise DataError("data file has no rows")
    return Dataset(np.array(W), np.array(A), np.array(Y), actions, adjust_idx)


def fmt(x) -> str:
    if isinstance(x, (str, np.str_)):
        return str(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return "nan"
    return format(x, ".12g")


def header_lines(command: str, seed, digest: str | None) -> list[str]:
    parts = [f"cpip {__version__}", f"command={command}", f"seed={seed}"]
    if digest:
        parts.append(f"config_sha256={digest}")
    return ["# " + " ".join(parts)]


def render_csv(columns, rows, meta: list[str] | None = None) -> str:
    buf = io.StringIO()
    for line in meta or []:
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_dataset_csv(path, data: Dataset, meta: list[str] | None = None) -> None:
    cols = [f"W{j + 1}" for j in range(data.p)] + ["A", "Y"]
    rows = [[*w, int(a), y] for w, a, y in zip(data.W, data.A, data.Y)]
    Path(path).write_text(render_csv(cols, rows, meta))
