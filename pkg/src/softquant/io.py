"""Persistence: dense CSV matrices (bit-exact round trip) and JSON reports.

Matrix format: a header line ``rows,cols`` followed by one comma-separated
line per row, every value printed with 17 significant digits so float64
round-trips exactly.
"""

import json
from pathlib import Path

import numpy as np

from .exceptions import ParseError

__all__ = ["save_matrix", "load_matrix", "save_report", "load_report"]


def save_matrix(path, matrix) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {matrix.shape}")
    rows, cols = matrix.shape
    with open(path, "w") as fh:
        fh.write(f"{rows},{cols}\n")
        for row in matrix:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_matrix(path) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("missing header", 1)
    head = lines[0].split(",")
    if len(head) != 2:
        raise ParseError(f"header must be 'rows,cols', got {lines[0]!r}", 1)
    try:
        rows, cols = int(head[0]), int(head[1])
    except ValueError:
        raise ParseError(f"non-integer header {lines[0]!r}", 1) from None
    if rows < 0 or cols < 0:
        raise ParseError("negative dimensions", 1)
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != rows:
        raise ParseError(f"expected {rows} data lines, found {len(body)}", len(lines))
    out = np.empty((rows, cols))
    for i, line in enumerate(body):
        parts = line.split(",")
        if len(parts) != cols:
            raise ParseError(f"expected {cols} values, found {len(parts)}", i + 2)
        try:
            out[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise ParseError(str(exc), i + 2) from None
    if not np.isfinite(out).all() and rows * cols:
        raise ParseError("non-finite value in matrix body", 2)
    return out


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def save_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(_jsonable(report), indent=2) + "\n")


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
