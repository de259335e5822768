"""CSV ingestion, INI configs and the versioned model container."""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .data import Column, Dataset, Schema, detect_kind
from .errors import ParseError, SchemaError, VersionError

FORMAT_VERSION = 1
MODEL_MAGIC = "frugalflows-model"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


# ---------------------------------------------------------------------------
# CSV


def schema_from_config(cp: configparser.ConfigParser | None, header: list[str]) -> tuple[Schema, set]:
    """Schema from an optional ``[schema]`` section plus the set of declared covariate names.

    Undeclared covariates are typed later by kind detection; treatment and
    outcome default to columns named ``t`` and ``y``.
    """
    sec = cp["schema"] if cp is not None and cp.has_section("schema") else {}
    treatment = sec.get("treatment", "t")
    outcome = sec.get("outcome", "y")
    discrete = _names(sec.get("discrete", ""))
    continuous = _names(sec.get("continuous", ""))
    for name in (treatment, outcome):
        if name not in header:
            raise SchemaError(f"column {name!r} missing from CSV header {header}")
    cols = []
    for name in header:
        if name == treatment:
            cols.append(Column(name, "treatment", "discrete"))
        elif name == outcome:
            cols.append(Column(name, "outcome"))
        elif name in discrete:
            cols.append(Column(name, "covariate", "discrete"))
        elif name in continuous:
            cols.append(Column(name, "covariate", "continuous"))
        else:
            cols.append(Column(name, "covariate", "continuous"))
    unknown = (discrete | continuous) - set(header)
    if unknown:
        raise SchemaError(f"schema names columns not in the CSV: {sorted(unknown)}")
    declared = discrete | continuous
    return Schema(tuple(cols)), declared


def _names(text: str) -> set[str]:
    return {s.strip() for s in text.split(",") if s.strip()}


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Header and float matrix of a comma-separated file; line numbers are 1-based."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header) or any(not h for h in header):
            raise ParseError(f"{path}:1: header has empty or duplicate names")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            values = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "" or cell.lower() in ("na", "nan", "null"):
                    raise ParseError(f"{path}:{line}: missing value in column {name!r}")
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}:{line}: cannot parse {cell!r} in column {name!r}") from None
            rows.append(values)
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    if not np.all(np.isfinite(data)):
        bad = int(np.argwhere(~np.isfinite(data))[0, 0]) + 2
        raise ParseError(f"{path}:{bad}: non-finite value")
    return header, data


def read_dataset(path, cp: configparser.ConfigParser | None = None) -> Dataset:
    header, data = read_table(path)
    schema, declared = schema_from_config(cp, header)
    z_cols = schema.covariates
    idx = {name: j for j, name in enumerate(header)}
    z = np.column_stack([data[:, idx[c.name]] for c in z_cols]) if z_cols else np.empty((len(data), 0))
    kinds = tuple(c.kind if c.name in declared else detect_kind(z[:, k]) for k, c in enumerate(z_cols))
    t = data[:, idx[schema.treatment.name]]
    if not np.all((t == 0) | (t == 1)):
        raise SchemaError(f"treatment column {schema.treatment.name!r} must be 0/1")
    return Dataset(z, t, data[:, idx[schema.outcome.name]], tuple(c.name for c in z_cols), kinds)


def format_float(x: float) -> str:
    return repr(float(x))


def write_dataset(path, ds: Dataset) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(ds.z_names) + ["t", "y"])
        for zi, ti, yi in zip(ds.z, ds.t, ds.y):
            w.writerow([format_float(v) for v in zi] + [format_float(ti), format_float(yi)])


def write_rows(path, header, rows) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


# ---------------------------------------------------------------------------
# config


def read_config(path=None, text: str | None = None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    try:
        if text is not None:
            cp.read_string(text)
        elif path is not None:
            with Path(path).open(encoding="utf-8") as fh:
                cp.read_file(fh)
    except configparser.Error as exc:
        raise ParseError(f"config: {exc}") from exc
    return cp


def config_text(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# model container


def _flatten(obj, arrays: dict, prefix: str):
    if isinstance(obj, dict):
        return {k: _flatten(v, arrays, f"{prefix}.{k}") for k, v in obj.items()}
    if isinstance(obj, (list, tuple)) and any(isinstance(v, np.ndarray) or isinstance(v, (dict, list)) for v in obj):
        return [_flatten(v, arrays, f"{prefix}.{i}") for i, v in enumerate(obj)]
    if isinstance(obj, np.ndarray):
        name = f"{prefix.lstrip('.')}.npy"
        arrays[name] = obj
        return {"__array__": name}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, tuple):
        return list(obj)
    return obj


def _unflatten(obj, arrays: dict):
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            return arrays[obj["__array__"]]
        return {k: _unflatten(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unflatten(v, arrays) for v in obj]
    return obj


def model_bytes(payload: dict) -> bytes:
    """Serialise a nested dict of scalars/lists/arrays; identical input gives identical bytes."""
    arrays: dict[str, np.ndarray] = {}
    meta = {"magic": MODEL_MAGIC, "format_version": FORMAT_VERSION, "payload": _flatten(payload, arrays, "")}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_ZIP_DATE)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            arr_buf = io.BytesIO()
            np.save(arr_buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, arr_buf.getvalue())
    return buf.getvalue()


def save_payload(path, payload: dict) -> str:
    data = model_bytes(payload)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_payload(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("magic") != MODEL_MAGIC:
                raise VersionError(f"{path} is not a frugalflows model file")
            if meta.get("format_version") != FORMAT_VERSION:
                raise VersionError(f"{path}: model format {meta.get('format_version')} is not supported "
                                   f"(expected {FORMAT_VERSION})")
            arrays = {n: np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
                      for n in zf.namelist() if n.endswith(".npy")}
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise VersionError(f"{path}: unreadable model container ({exc})") from exc
    return _unflatten(meta["payload"], arrays)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
