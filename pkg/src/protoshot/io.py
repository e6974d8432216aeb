"""JSONL datasets, JSON checkpoints and fixed-format CSV writers."""

from __future__ import annotations

import json
import numbers
from pathlib import Path

import numpy as np

from .episodes import Dataset, MultiLabelDataset
from .errors import ContractError


class DatasetFormatError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


def _is_int(v) -> bool:
    return isinstance(v, numbers.Integral) and not isinstance(v, bool)


def _is_real(v) -> bool:
    return isinstance(v, numbers.Real) and not isinstance(v, bool)


def save_dataset(ds: Dataset, path) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    with open(path, "w", newline="\n") as fh:
        for x, y in zip(ds.features.tolist(), ds.labels.tolist()):
            fh.write(json.dumps({"features": x, "label": y}) + "\n")


def load_dataset(path) -> Dataset:
    feats, labels = [], []
    dim = None
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(path, no, f"invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict) or set(rec) != {"features", "label"}:
                raise DatasetFormatError(path, no, 'expected keys "features" and "label"')
            x, y = rec["features"], rec["label"]
            if not _is_int(y):
                raise DatasetFormatError(path, no, f"label must be an integer, got {y!r}")
            if not isinstance(x, list) or not x or not all(_is_real(v) for v in x):
                raise DatasetFormatError(path, no, "features must be a non-empty list of numbers")
            if dim is None:
                dim = len(x)
            elif len(x) != dim:
                raise DatasetFormatError(path, no, f"feature dimension {len(x)} differs from {dim}")
            feats.append([float(v) for v in x])
            labels.append(y)
    if not feats:
        raise DatasetFormatError(path, 0, "no items")
    try:
        return Dataset(np.array(feats), np.array(labels))
    except ContractError as e:
        raise DatasetFormatError(path, 0, str(e)) from None


def save_multilabel(ds: MultiLabelDataset, path) -> None:
    with open(path, "w", newline="\n") as fh:
        for i, lab in zip(ds.ids, ds.labels):
            fh.write(json.dumps({"id": i, "labels": {str(c): int(n) for c, n in lab.items()}}) + "\n")


def load_multilabel(path) -> MultiLabelDataset:
    ids, labels = [], []
    with open(path) as fh:
        for no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(path, no, f"invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict) or set(rec) != {"id", "labels"}:
                raise DatasetFormatError(path, no, 'expected keys "id" and "labels"')
            if not _is_int(rec["id"]) or not isinstance(rec["labels"], dict):
                raise DatasetFormatError(path, no, "id must be an integer and labels an object")
            lab = {}
            for c, n in rec["labels"].items():
                if not c.lstrip("-").isdigit() or not _is_int(n) or n < 1:
                    raise DatasetFormatError(path, no, f"bad label entry {c!r}: {n!r}")
                lab[int(c)] = n
            ids.append(rec["id"])
            labels.append(lab)
    return MultiLabelDataset(ids, labels)


def fmt(v) -> str:
    return f"{float(v):.6f}"


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(c if isinstance(c, str) else (str(c) if _is_int(c) else fmt(c)) for c in row) + "\n")


def write_metrics_csv(metrics, path) -> None:
    if metrics is None or metrics.n_episodes < 1:
        raise ContractError("no metrics to write")
    rows = [(name, fmt(v), fmt(ci), str(int(n))) for name, v, ci, n in metrics.rows()]
    write_csv(path, ["metric", "value", "ci95_halfwidth", "n"], rows)


def read_csv(path) -> tuple:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


def write_matrix_csv(path, matrix) -> None:
    write_csv(path, None, [[fmt(v) for v in row] for row in np.asarray(matrix)])


def read_matrix_csv(path) -> np.ndarray:
    return np.array([[float(v) for v in ln.split(",")] for ln in Path(path).read_text().splitlines()])


def save_json(obj, path) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)
