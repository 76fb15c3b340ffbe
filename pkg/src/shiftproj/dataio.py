"""Deterministic CSV and JSON input/output for datasets and reports.

CSV schema: header ``x0..x{D-1}`` plus optional ``y`` and optional binary
``group`` columns, UTF-8, LF line endings, ``.`` decimal separator.  Floats
are written with ``repr`` so files round-trip bit for bit.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

from .data import TrainTestPair
from .errors import InputError

_X_COLUMN = re.compile(r"^x(\d+)$")


def write_dataset_csv(path, X, y=None, group=None) -> Path:
    """Write covariates (and optional y / group columns) to a CSV file."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InputError("X must be 2-d")
    n, d = X.shape
    header = [f"x{j}" for j in range(d)]
    if y is not None:
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(y) != n:
            raise InputError("y length does not match X")
        header.append("y")
    if group is not None:
        group = np.asarray(group).ravel()
        if len(group) != n:
            raise InputError("group length does not match X")
        header.append("group")
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n):
            cells = [repr(float(v)) for v in X[i]]
            if y is not None:
                cells.append(repr(float(y[i])))
            if group is not None:
                cells.append(str(int(group[i])))
            fh.write(",".join(cells) + "\n")
    return path


def read_dataset_csv(path):
    """Read a dataset CSV; returns (X, y or None, group or None)."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise InputError(f"{path} is empty")
    header = [cell.strip() for cell in rows[0]]
    x_cols = []
    for idx, name in enumerate(header):
        m = _X_COLUMN.match(name)
        if m:
            x_cols.append((int(m.group(1)), idx))
        elif name not in ("y", "group"):
            raise InputError(f"{path}: unexpected column {name!r}")
    x_cols.sort()
    if not x_cols or [j for j, _ in x_cols] != list(range(len(x_cols))):
        raise InputError(f"{path}: covariate columns must be x0..x{{D-1}} without gaps")
    y_idx = header.index("y") if "y" in header else None
    g_idx = header.index("group") if "group" in header else None

    data_rows = [r for r in rows[1:] if r and any(cell.strip() for cell in r)]
    if not data_rows:
        raise InputError(f"{path} has no data rows")
    X = np.empty((len(data_rows), len(x_cols)))
    y = np.empty(len(data_rows)) if y_idx is not None else None
    group = np.empty(len(data_rows), dtype=np.int64) if g_idx is not None else None
    for i, row in enumerate(data_rows):
        if len(row) != len(header):
            raise InputError(f"{path}: row {i + 2} has {len(row)} cells, expected {len(header)}")
        try:
            for j, idx in x_cols:
                X[i, j] = float(row[idx])
            if y is not None:
                y[i] = float(row[y_idx])
            if group is not None:
                val = float(row[g_idx])
                if val not in (0.0, 1.0):
                    raise ValueError(f"group value {row[g_idx]!r} is not 0/1")
                group[i] = int(val)
        except ValueError as exc:
            raise InputError(f"{path}: row {i + 2}: {exc}") from exc
    if not np.all(np.isfinite(X)) or (y is not None and not np.all(np.isfinite(y))):
        raise InputError(f"{path} contains non-finite values")
    return X, y, group


def write_json(path, obj) -> Path:
    """Write JSON with sorted keys and a trailing newline (byte-deterministic)."""
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc


def write_split(out_dir, pair: TrainTestPair, manifest: dict | None = None) -> dict:
    """Write train/test/holdout CSVs plus a manifest; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": write_dataset_csv(out / "train.csv", pair.X_tr, pair.y_tr),
        "test": write_dataset_csv(out / "test.csv", pair.X_te),
        "holdout": write_dataset_csv(out / "holdout.csv", pair.holdout_X, pair.y_te_holdout),
    }
    body = dict(manifest or {})
    body.setdefault("meta", _jsonable(pair.meta))
    body["files"] = {k: p.name for k, p in paths.items()}
    paths["manifest"] = write_json(out / "manifest.json", body)
    return paths


def read_split(in_dir) -> TrainTestPair:
    """Load a split written by :func:`write_split`."""
    folder = Path(in_dir)
    X_tr, y_tr, _ = read_dataset_csv(folder / "train.csv")
    if y_tr is None:
        raise InputError(f"{folder / 'train.csv'} must carry a y column")
    X_te, _, _ = read_dataset_csv(folder / "test.csv")
    X_ho, y_ho, _ = read_dataset_csv(folder / "holdout.csv")
    if y_ho is None:
        raise InputError(f"{folder / 'holdout.csv'} must carry a y column")
    meta = {}
    manifest = folder / "manifest.json"
    if manifest.exists():
        meta = read_json(manifest).get("meta", {})
    return TrainTestPair(
        X_tr=X_tr, y_tr=y_tr, X_te=X_te, holdout_X=X_ho, y_te_holdout=y_ho, meta=meta
    )


def _jsonable(obj):
    """Recursively convert numpy scalars/arrays so json can serialize them."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
