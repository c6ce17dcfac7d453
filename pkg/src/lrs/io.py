"""Dataset bundles, model files, and the metrics sink.

A dataset bundle is a directory holding meta.json, data.csv (header
``task,y,x1..xd``, one row per sample, 17-significant-digit decimals) and an
optional truth.json with the planted model as nested arrays.  Models are
single JSON documents with the sparse vectors stored as (task, index, value)
triplets.  All floats are written with round-trip precision, so write/read
cycles are bit-exact.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .dp import PrivacyLedger
from .errors import FormatError
from .model import GroundTruth, ModelState, TaskDataset

FORMAT_VERSION = 1


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _nested(a):
    return np.asarray(a, dtype=np.float64).tolist()


def write_dataset_bundle(path, datasets, meta, gt: GroundTruth | None = None):
    """Write meta.json + data.csv (+ truth.json when the planted model is known)."""
    os.makedirs(path, exist_ok=True)
    d = datasets[0].x.shape[1]
    full_meta = {
        "format_version": FORMAT_VERSION,
        "d": d,
        "t": len(datasets),
        "m": [ds.m for ds in datasets],
    }
    full_meta.update(meta)
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(full_meta, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(path, "data.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "y"] + [f"x{j}" for j in range(1, d + 1)])
        for i, ds in enumerate(datasets):
            for row in range(ds.m):
                writer.writerow([i, _fmt(ds.y[row])] + [_fmt(v) for v in ds.x[row]])
    if gt is not None:
        truth = {
            "u_star": _nested(gt.u_star),
            "w_star": _nested(gt.w_star),
            "b_star": _nested(gt.b_star),
            "sigma": gt.sigma,
            "k": gt.k,
            "zeta": gt.zeta,
        }
        with open(os.path.join(path, "truth.json"), "w") as fh:
            json.dump(truth, fh)
            fh.write("\n")


def _require(meta, key, where):
    if key not in meta:
        raise FormatError(f"{where} is missing required key {key!r}")
    return meta[key]


def read_dataset_bundle(path):
    """Read a bundle; returns (datasets, meta, ground_truth_or_None)."""
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise FormatError(f"no meta.json in {path}")
    with open(meta_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"meta.json: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}")
    d = int(_require(meta, "d", "meta.json"))
    t = int(_require(meta, "t", "meta.json"))

    expected = ["task", "y"] + [f"x{j}" for j in range(1, d + 1)]
    rows_by_task: dict[int, list] = {i: [] for i in range(t)}
    csv_path = os.path.join(path, "data.csv")
    if not os.path.exists(csv_path):
        raise FormatError(f"no data.csv in {path}")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError("data.csv is empty")
        if header != expected:
            missing = [c for c in expected if c not in header]
            if missing:
                raise FormatError(f"data.csv is missing column(s) {missing}; expected header {','.join(expected)}")
            raise FormatError(f"data.csv header mismatch; expected exactly {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise FormatError(f"data.csv row {lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                task = int(row[0])
            except ValueError:
                raise FormatError(f"data.csv row {lineno}, column 'task': not an integer: {row[0]!r}")
            if not 0 <= task < t:
                raise FormatError(f"data.csv row {lineno}: task {task} outside [0, {t})")
            vals = []
            for col_name, field in zip(expected[1:], row[1:]):
                try:
                    vals.append(float(field))
                except ValueError:
                    raise FormatError(f"data.csv row {lineno}, column {col_name!r}: not a number: {field!r}")
            rows_by_task[task].append(vals)

    datasets = []
    for i in range(t):
        rows = rows_by_task[i]
        if not rows:
            raise FormatError(f"task {i} has no samples in data.csv")
        arr = np.asarray(rows, dtype=np.float64)
        datasets.append(TaskDataset(arr[:, 1:], arr[:, 0]))

    gt = None
    truth_path = os.path.join(path, "truth.json")
    if os.path.exists(truth_path):
        with open(truth_path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise FormatError(f"truth.json: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}")
        for key in ("u_star", "w_star", "b_star", "sigma", "k", "zeta"):
            _require(raw, key, "truth.json")
        gt = GroundTruth(
            np.asarray(raw["u_star"], dtype=np.float64),
            np.asarray(raw["w_star"], dtype=np.float64),
            np.asarray(raw["b_star"], dtype=np.float64),
            float(raw["sigma"]),
            int(raw["k"]),
            int(raw["zeta"]),
        )
    return datasets, meta, gt


def write_model(path, state: ModelState, k: int | None = None, ledger=None, ledger_delta=None, extra=None):
    """Write a fitted state as model.json; b is stored as sparse triplets."""
    rows, cols = np.nonzero(state.b)
    doc = {
        "version": FORMAT_VERSION,
        "d": state.d,
        "r": state.r,
        "t": state.t,
        "k": k if k is not None else int(np.max(state.b_nnz(), initial=0)),
        "u": _nested(state.u),
        "w": _nested(state.w),
        "b": [[int(cols[j]), int(rows[j]), float(state.b[rows[j], cols[j]])] for j in range(len(rows))],
    }
    if ledger is not None:
        doc["ledger"] = ledger.to_dict(ledger_delta)
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def read_model(path):
    """Read model.json back into (ModelState, document dict)."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}")
    for key in ("version", "d", "r", "t", "u", "w", "b"):
        _require(doc, key, os.path.basename(path))
    d, r, t = int(doc["d"]), int(doc["r"]), int(doc["t"])
    u = np.asarray(doc["u"], dtype=np.float64)
    w = np.asarray(doc["w"], dtype=np.float64)
    if u.shape != (d, r) or w.shape != (t, r):
        raise FormatError(f"model arrays have inconsistent shapes (u {u.shape}, w {w.shape})")
    b = np.zeros((d, t))
    for entry in doc["b"]:
        if len(entry) != 3:
            raise FormatError(f"bad sparse triplet {entry!r}")
        task, index, value = int(entry[0]), int(entry[1]), float(entry[2])
        if not (0 <= task < t and 0 <= index < d):
            raise FormatError(f"sparse triplet {entry!r} out of range")
        b[index, task] = value
    return ModelState(u, w, b), doc


def ledger_from_dict(doc) -> PrivacyLedger:
    ledger = PrivacyLedger(planned_releases=int(doc["planned_releases"]))
    for rel in doc.get("releases", []):
        ledger.entries.append((int(rel["iteration"]), float(rel["rho"])))
    return ledger


def write_metrics_csv(path, rows):
    """One CSV row per report record; column order fixed by the first record."""
    if not rows:
        with open(path, "w", newline="") as fh:
            fh.write("")
        return
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            out = []
            for f in fields:
                v = row.get(f, "")
                if isinstance(v, float):
                    out.append(_fmt(v))
                else:
                    out.append(v)
            writer.writerow(out)


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                try:
                    row[k] = float(v)
                except (TypeError, ValueError):
                    row[k] = v
            rows.append(row)
        return rows
