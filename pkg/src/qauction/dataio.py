"""File formats: Q-matrix CSV/JSON, valuation dataset JSON, heatmap and
activity CSVs. All writers are deterministic byte-for-byte given equal inputs."""

from __future__ import annotations

import csv
import io
import json
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .valuation import (
    ActionCatalog,
    BundleIndex,
    QMatrix,
    ValuationDataset,
    enumerate_bundles,
)

DATASET_VERSION = 1


def write_qmatrix_csv(path, q: QMatrix, catalog: ActionCatalog) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["host_id", "host_type", *catalog.actions])
        for i in range(q.num_hosts):
            writer.writerow([q.host_ids[i], q.host_types[i], *[repr(float(v)) for v in q.values[i]]])


def read_qmatrix_csv(path) -> tuple[QMatrix, ActionCatalog]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 3 or rows[0][:2] != ["host_id", "host_type"]:
        raise InvalidInputError(f"{path}: expected header host_id,host_type,<actions...>")
    actions = tuple(rows[0][2:])
    ids, types, values = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2 + len(actions):
            raise InvalidInputError(f"{path}:{lineno}: expected {2 + len(actions)} fields, got {len(row)}")
        ids.append(row[0])
        types.append(row[1])
        try:
            values.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: non-numeric Q value: {exc}") from exc
    if not values:
        raise InvalidInputError(f"{path}: no host rows")
    q = QMatrix(values=np.array(values), host_ids=tuple(ids), host_types=tuple(types))
    return q, ActionCatalog(actions)


def write_qmatrix_json(path, q: QMatrix, catalog: ActionCatalog) -> None:
    doc = {
        "actions": list(catalog.actions),
        "hosts": [
            {"id": q.host_ids[i], "type": q.host_types[i], "q": [float(v) for v in q.values[i]]}
            for i in range(q.num_hosts)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_qmatrix_json(path) -> tuple[QMatrix, ActionCatalog]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        actions = tuple(doc["actions"])
        hosts = doc["hosts"]
        ids = tuple(h["id"] for h in hosts)
        types = tuple(h["type"] for h in hosts)
        values = np.array([[float(v) for v in h["q"]] for h in hosts])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"{path}: malformed Q-matrix JSON: {exc}") from exc
    if values.ndim != 2 or values.shape[1] != len(actions):
        raise InvalidInputError(f"{path}: host rows do not match the action list")
    return QMatrix(values=values, host_ids=ids, host_types=types), ActionCatalog(actions)


def read_qmatrix(path) -> tuple[QMatrix, ActionCatalog]:
    """Dispatch on extension: .csv or .json."""
    text = str(path)
    if text.endswith(".json"):
        return read_qmatrix_json(path)
    if text.endswith(".csv"):
        return read_qmatrix_csv(path)
    raise InvalidInputError(f"unsupported Q-matrix file type: {path}")


def write_dataset(path, dataset: ValuationDataset, meta: Optional[dict] = None) -> None:
    index = dataset.bundle_index
    doc = {
        "version": DATASET_VERSION,
        "actions": list(index.catalog.actions),
        "bundles": [list(b.action_indices()) for b in index.bundles],
        "samples": [[float(v) for v in sample.ravel()] for sample in dataset.samples],
        "host_ids": list(dataset.host_ids),
        "host_types": list(dataset.host_types),
        "raw_min": dataset.raw_min,
        "raw_max": dataset.raw_max,
    }
    if meta is not None:
        doc["meta"] = meta
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_dataset(path) -> ValuationDataset:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read dataset {path}: {exc}") from exc
    if doc.get("version") != DATASET_VERSION:
        raise InvalidInputError(f"{path}: unsupported dataset version {doc.get('version')!r}")
    try:
        catalog = ActionCatalog(tuple(doc["actions"]))
        index = enumerate_bundles(catalog)
        expected = [list(b.action_indices()) for b in index.bundles]
        if doc["bundles"] != expected:
            raise InvalidInputError(f"{path}: bundle list is not in ascending-bitmask order")
        flat = doc["samples"]
        n_bundles = index.num_bundles
        samples = np.array(flat, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[1] % n_bundles != 0:
            raise InvalidInputError(f"{path}: sample rows are not n x {n_bundles} row-major grids")
        n = samples.shape[1] // n_bundles
        samples = samples.reshape(samples.shape[0], n, n_bundles)
        host_ids = tuple(doc.get("host_ids", [f"host{i}" for i in range(n)]))
        host_types = tuple(doc.get("host_types", ["User"] * n))
    except InvalidInputError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"{path}: malformed dataset: {exc}") from exc
    return ValuationDataset(
        samples=samples,
        bundle_index=index,
        host_ids=host_ids,
        host_types=host_types,
        raw_min=float(doc.get("raw_min", 0.0)),
        raw_max=float(doc.get("raw_max", 0.0)),
    )


def heatmap_csv_text(host_ids, host_types, index: BundleIndex, matrix) -> str:
    """Batch-averaged allocation heatmap: hosts as rows, bundles as columns."""
    matrix = np.asarray(matrix, dtype=np.float64)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["host_id", "host_type", *index.labels()])
    for i, (hid, htype) in enumerate(zip(host_ids, host_types)):
        writer.writerow([hid, htype, *[repr(float(v)) for v in matrix[i]]])
    return buf.getvalue()


def read_heatmap_csv(path) -> tuple[tuple[str, ...], tuple[str, ...], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["host_id", "host_type"]:
        raise InvalidInputError(f"{path}: expected header host_id,host_type,<bundles...>")
    labels = rows[0][2:]
    ids, types, data = [], [], []
    for row in rows[1:]:
        if not row:
            continue
        ids.append(row[0])
        types.append(row[1])
        data.append([float(v) for v in row[2:]])
    return tuple(ids), tuple(types), labels, np.array(data, dtype=np.float64)


def read_activity_csv(path) -> dict[str, tuple[float, float]]:
    """host_id -> (red action count, blue action count)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["host_id", "red_actions", "blue_actions"]:
        raise InvalidInputError(f"{path}: expected header host_id,red_actions,blue_actions")
    out: dict[str, tuple[float, float]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise InvalidInputError(f"{path}:{lineno}: expected 3 fields")
        try:
            out[row[0]] = (float(row[1]), float(row[2]))
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: non-numeric count: {exc}") from exc
    if not out:
        raise InvalidInputError(f"{path}: no activity rows")
    return out


def dump_json(path, doc: dict) -> None:
    """Stable JSON writer used for reports (fixed key order as constructed)."""
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
