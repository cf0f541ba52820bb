"""Dataset manifests, CSV readers/writers and JSON fit artifacts.

CSV output uses 12 significant digits and LF line endings so files are
byte-stable for fixed inputs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .design import SurvivalDataset, functional_scores
from .errors import InputError
from .splines import BsplineBasis, build_basis, evaluate_basis

SCHEMA_VERSION = "1"


def fmt(x) -> str:
    """Fixed 12-significant-digit text for a number."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x == 0:
        return "0"
    return format(x, ".12g")


def write_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def _read_csv(path, required: list[str]) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file")
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(f"{path}: missing column(s) {missing}")
        rows = [r for r in reader if r]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise InputError(f"{path}: row {i + 2} has {len(r)} fields, expected {len(header)}")
    return header, rows


def _num(text: str, path, row: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise InputError(f"{path}: row {row}: column {col!r} is not a number: {text!r}")


def _int(text: str, path, row: int, col: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise InputError(f"{path}: row {row}: column {col!r} is not an integer: {text!r}")


@dataclass
class DatasetManifest:
    survival_file: str
    functional_file: str | None
    grid_file: str | None
    scalar_file: str | None = None
    options: dict = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def resolve(self, name: str | None) -> Path | None:
        return None if name is None else (self.base_dir / name)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "survival_file": self.survival_file,
                "scalar_file": self.scalar_file, "functional_file": self.functional_file,
                "grid_file": self.grid_file, "options": self.options}


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})")
    if str(doc.get("schema_version")) != SCHEMA_VERSION:
        raise InputError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    if "survival_file" not in doc:
        raise InputError(f"{path}: survival_file is required")
    if (doc.get("functional_file") is None) != (doc.get("grid_file") is None):
        raise InputError(f"{path}: functional_file and grid_file must be given together")
    return DatasetManifest(doc["survival_file"], doc.get("functional_file"),
                           doc.get("grid_file"), doc.get("scalar_file"),
                           dict(doc.get("options") or {}), SCHEMA_VERSION, path.parent)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def _load_grid(path) -> np.ndarray:
    _, rows = _read_csv(path, ["grid_index", "s_value"])
    header = ["grid_index", "s_value"]
    idx = [_int(r[0], path, i + 2, header[0]) for i, r in enumerate(rows)]
    val = [_num(r[1], path, i + 2, header[1]) for i, r in enumerate(rows)]
    order = np.argsort(idx)
    idx = np.asarray(idx)[order]
    if idx.size == 0 or not np.array_equal(idx, np.arange(idx.size)):
        raise InputError(f"{path}: grid_index must be dense 0..m-1")
    return np.asarray(val)[order]


def load_dataset(manifest: DatasetManifest | str | Path) -> SurvivalDataset:
    """Read and validate a dataset; subjects are ordered by subject_id."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    spath = manifest.resolve(manifest.survival_file)
    header, rows = _read_csv(spath, ["subject_id", "time", "event"])
    ci = {h: i for i, h in enumerate(header)}
    surv = {}
    for i, r in enumerate(rows):
        sid = r[ci["subject_id"]].strip()
        if sid in surv:
            raise InputError(f"{spath}: duplicate subject {sid!r} at row {i + 2}")
        t = _num(r[ci["time"]], spath, i + 2, "time")
        e = _int(r[ci["event"]], spath, i + 2, "event")
        if e not in (0, 1):
            raise InputError(f"{spath}: row {i + 2}: event must be 0 or 1")
        surv[sid] = (t, e)
    ids = sorted(surv)
    if not ids:
        raise InputError(f"{spath}: no subjects")
    pos = {sid: j for j, sid in enumerate(ids)}
    n = len(ids)

    scalar = np.zeros((n, 0))
    scalar_names: list[str] = []
    if manifest.scalar_file:
        xpath = manifest.resolve(manifest.scalar_file)
        header, rows = _read_csv(xpath, ["subject_id"])
        scalar_names = [h for h in header if h != "subject_id"]
        sidx = header.index("subject_id")
        cols = [j for j, h in enumerate(header) if h != "subject_id"]
        scalar = np.full((n, len(cols)), np.nan)
        seen = set()
        for i, r in enumerate(rows):
            sid = r[sidx].strip()
            if sid not in pos:
                raise InputError(f"{xpath}: row {i + 2}: subject {sid!r} has no survival record")
            if sid in seen:
                raise InputError(f"{xpath}: duplicate subject {sid!r} at row {i + 2}")
            seen.add(sid)
            scalar[pos[sid]] = [_num(r[j], xpath, i + 2, header[j]) for j in cols]
        absent = [sid for sid in ids if sid not in seen]
        if absent:
            raise InputError(f"{xpath}: missing scalar rows for subjects {absent[:10]}")

    functional: list[np.ndarray] = []
    fnames: list[str] = []
    grid = np.array([0.0, 1.0])
    if manifest.functional_file:
        grid = _load_grid(manifest.resolve(manifest.grid_file))
        m = grid.size
        fpath = manifest.resolve(manifest.functional_file)
        header, rows = _read_csv(fpath, ["subject_id", "covariate", "grid_index", "value"])
        ci = {h: i for i, h in enumerate(header)}
        blocks: dict[str, np.ndarray] = {}
        seen_at: dict[str, np.ndarray] = {}
        for i, r in enumerate(rows):
            sid = r[ci["subject_id"]].strip()
            cov = r[ci["covariate"]].strip()
            g = _int(r[ci["grid_index"]], fpath, i + 2, "grid_index")
            if sid not in pos:
                raise InputError(f"{fpath}: row {i + 2}: subject {sid!r} has no survival record")
            if not 0 <= g < m:
                raise InputError(f"{fpath}: row {i + 2}: grid_index {g} is not in the grid file")
            if cov not in blocks:
                blocks[cov] = np.full((n, m), np.nan)
                seen_at[cov] = np.zeros((n, m), dtype=np.int64)
                fnames.append(cov)
            if seen_at[cov][pos[sid], g]:
                raise InputError(f"{fpath}: row {i + 2}: duplicate entry for subject {sid!r}, "
                                 f"covariate {cov!r}, grid_index {g} "
                                 f"(first at row {seen_at[cov][pos[sid], g]})")
            seen_at[cov][pos[sid], g] = i + 2
            blocks[cov][pos[sid], g] = _num(r[ci["value"]], fpath, i + 2, "value")
        for cov in fnames:
            holes = np.flatnonzero(np.isnan(blocks[cov]).any(axis=1))
            if holes.size:
                raise InputError(f"{fpath}: covariate {cov!r} has missing cells for subjects "
                                 f"{[ids[h] for h in holes[:10]]}")
            functional.append(blocks[cov])
    y = np.array([surv[s][0] for s in ids])
    d = np.array([surv[s][1] for s in ids])
    return SurvivalDataset(y, d, scalar, functional, grid, scalar_names, fnames, ids)


def write_dataset(dataset: SurvivalDataset, directory, stem: str = "data",
                  options: dict | None = None) -> Path:
    """Write the four CSV files and a manifest; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = dataset.subject_ids or [f"s{i + 1:05d}" for i in range(dataset.n)]
    write_csv(d / f"{stem}_survival.csv", ["subject_id", "time", "event"],
              ([sid, dataset.y[i], int(dataset.delta[i])] for i, sid in enumerate(ids)))
    scalar_file = None
    if dataset.p:
        scalar_file = f"{stem}_scalar.csv"
        write_csv(d / scalar_file, ["subject_id"] + list(dataset.scalar_names),
                  ([sid] + list(dataset.scalar[i]) for i, sid in enumerate(ids)))
    functional_file = grid_file = None
    if dataset.k:
        functional_file, grid_file = f"{stem}_functional.csv", f"{stem}_grid.csv"
        write_csv(d / grid_file, ["grid_index", "s_value"], enumerate(dataset.grid))
        write_functional_long(d / functional_file, ids, dataset.functional_names,
                              dataset.functional)
    man = DatasetManifest(f"{stem}_survival.csv", functional_file, grid_file, scalar_file,
                          dict(options or {}))
    path = d / f"{stem}_manifest.json"
    write_manifest(man, path)
    return path


def write_functional_long(path, ids, names, blocks) -> None:
    def rows():
        for name, block in zip(names, blocks):
            for i, sid in enumerate(ids):
                for g, v in enumerate(block[i]):
                    yield [sid, name, g, v]
    write_csv(path, ["subject_id", "covariate", "grid_index", "value"], rows())


def load_activity(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Minute-level activity CSV: subject_id, day, minute, count[, valid].

    Returns per-subject (days x 1440) count matrices (NaN where absent) and
    per-subject valid-day masks (all True when the column is absent).
    """
    from .lmoments import MINUTES_PER_DAY
    header, rows = _read_csv(path, ["subject_id", "day", "minute", "count"])
    ci = {h: i for i, h in enumerate(header)}
    has_valid = "valid" in ci
    raw: dict[str, dict[int, dict[int, float]]] = {}
    validity: dict[str, dict[int, bool]] = {}
    for i, r in enumerate(rows):
        sid = r[ci["subject_id"]].strip()
        day = _int(r[ci["day"]], path, i + 2, "day")
        minute = _int(r[ci["minute"]], path, i + 2, "minute")
        if not 0 <= minute < MINUTES_PER_DAY:
            raise InputError(f"{path}: row {i + 2}: minute {minute} outside 0..{MINUTES_PER_DAY - 1}")
        val = _num(r[ci["count"]], path, i + 2, "count")
        days = raw.setdefault(sid, {})
        mins = days.setdefault(day, {})
        if minute in mins:
            raise InputError(f"{path}: row {i + 2}: duplicate minute {minute} for subject "
                             f"{sid!r}, day {day}")
        mins[minute] = val
        if has_valid:
            v = _int(r[ci["valid"]], path, i + 2, "valid") == 1
            prev = validity.setdefault(sid, {}).setdefault(day, v)
            if prev != v:
                raise InputError(f"{path}: row {i + 2}: inconsistent validity flag for "
                                 f"subject {sid!r}, day {day}")
    records, valid = {}, {}
    for sid in sorted(raw):
        days = sorted(raw[sid])
        mat = np.full((len(days), MINUTES_PER_DAY), np.nan)
        for j, day in enumerate(days):
            for minute, v in raw[sid][day].items():
                mat[j, minute] = v
        records[sid] = mat
        valid[sid] = np.array([validity.get(sid, {}).get(day, True) for day in days])
    return records, valid


# fit artifacts ----------------------------------------------------------------

def basis_to_dict(basis: BsplineBasis) -> dict:
    return {"degree": basis.degree, "num_basis": basis.num_basis, "domain": list(basis.domain)}


def basis_from_dict(doc: dict) -> BsplineBasis:
    return build_basis(int(doc["degree"]), int(doc["num_basis"]), tuple(doc["domain"]))


def json_safe(x):
    """JSON-safe copy: arrays to lists, non-finite floats to strings."""
    if isinstance(x, dict):
        return {str(k): json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [json_safe(v) for v in x]
    if isinstance(x, np.ndarray):
        return json_safe(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def build_artifact(dataset: SurvivalDataset, result, design, bases, coefs, *, config: dict,
                   seed=None, surface=None) -> dict:
    """Assemble the fit artifact document."""
    sel_s = [dataset.scalar_names[j] for j in result.selected_scalars]
    sel_g = [dataset.functional_names[g] for g in result.selected_groups]
    curves = {}
    for g in result.selected_groups:
        curves[dataset.functional_names[g]] = {"grid": dataset.grid, "values": coefs.functions[g]}
    doc = {
        "schema_version": SCHEMA_VERSION,
        "tool": "funcox",
        "tool_version": __version__,
        "seed": seed,
        "config": config,
        "n": dataset.n,
        "n_events": int(dataset.delta.sum()),
        "scalar_names": dataset.scalar_names,
        "functional_names": dataset.functional_names,
        "selected_scalars": sel_s,
        "selected_functional": sel_g,
        "lambda": result.lam,
        "psi": design.psi,
        "scalar_coefficients": dict(zip(dataset.scalar_names, coefs.beta)),
        "basis": [basis_to_dict(b) for b in bases],
        "basis_coefficients": dict(zip(dataset.functional_names, coefs.b)),
        "curves": curves,
        "offset": coefs.offset,
        "final_loglik": result.final_loglik,
        "objective": result.objective,
        "diagnostics": {"converged": result.converged, "iterations": result.n_iterations,
                        "max_curvature_multiplier": result.max_curvature,
                        "design_warnings": design.warnings},
    }
    if surface is not None:
        best = surface.best
        doc["ebic"] = {"optimum": list(surface.optimum), "ebic": best.ebic, "bic": best.bic,
                       "df": best.df, "psi_grid": surface.psi_grid,
                       "n_lambda": int(surface.lambdas.shape[1]),
                       "failed_cells": sum(not c.ok for col in surface.cells for c in col),
                       "spot_checks": surface.spot_checks}
    return json_safe(doc)


def write_artifact(doc: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_artifact(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"artifact not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})")
    if doc.get("schema_version") != SCHEMA_VERSION or doc.get("tool") != "funcox":
        raise InputError(f"{path}: not a funcox artifact of schema {SCHEMA_VERSION}")
    return doc


def artifact_linear_predictor(doc: dict, dataset: SurvivalDataset) -> np.ndarray:
    """Linear predictor of a stored fit on a dataset (up to the Cox-irrelevant constant)."""
    if doc["scalar_names"] != dataset.scalar_names or \
            doc["functional_names"] != dataset.functional_names:
        raise InputError("artifact and dataset covariates differ")
    beta = np.array([doc["scalar_coefficients"][s] for s in dataset.scalar_names], dtype=float)
    eta = dataset.scalar @ beta if dataset.p else np.zeros(dataset.n)
    if dataset.k:
        bases = [basis_from_dict(b) for b in doc["basis"]]
        scores = functional_scores(dataset, bases)
        for name, s in zip(dataset.functional_names, scores):
            eta = eta + s @ np.asarray(doc["basis_coefficients"][name], dtype=float)
    return eta


def artifact_curves(doc: dict, points: int) -> tuple[np.ndarray, np.ndarray]:
    """Every group's coefficient function on an even grid: (grid, values k x points)."""
    if points < 2:
        raise InputError("need at least two grid points")
    names = doc["functional_names"]
    if not names:
        return np.zeros(0), np.zeros((0, 0))
    bases = [basis_from_dict(b) for b in doc["basis"]]
    a, b = bases[0].domain
    grid = np.linspace(a, b, points)
    vals = np.array([evaluate_basis(bs, grid, 0) @ np.asarray(doc["basis_coefficients"][nm])
                     for bs, nm in zip(bases, names)])
    return grid, vals
