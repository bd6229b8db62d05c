"""CSV ingestion and column standardization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import DataError


@dataclass
class DatasetFile:
    path: Optional[str]
    values: np.ndarray
    names: Optional[List[str]] = None
    mean: np.ndarray = field(init=False)
    sd: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mean = self.values.mean(axis=0)
        n = self.values.shape[0]
        self.sd = self.values.std(axis=0, ddof=1) if n > 1 else np.zeros(self.values.shape[1])

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def _parse_float(cell: str):
    try:
        v = float(cell)
    except ValueError:
        return None
    return v


def load_csv(path, *, header: Optional[bool] = None) -> DatasetFile:
    """Read a comma-separated numeric matrix.

    ``header=None`` auto-detects a single header row (first row not fully
    numeric). Row numbers in errors are 1-based file lines.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    rows = [r for r in csv.reader(text.splitlines())]
    # ignore trailing blank lines only
    while rows and not any(c.strip() for c in rows[-1]):
        rows.pop()
    if not rows:
        raise DataError(f"{path}: empty file")
    first_numeric = all(_parse_float(c) is not None for c in rows[0])
    has_header = (not first_numeric) if header is None else header
    names = [c.strip() for c in rows[0]] if has_header else None
    body = rows[1:] if has_header else rows
    start = 2 if has_header else 1
    if not body:
        raise DataError(f"{path}: no data rows")
    width = len(names) if names is not None else len(body[0])
    values = np.empty((len(body), width))
    for i, row in enumerate(body):
        lineno = start + i
        if len(row) != width:
            raise DataError(f"{path}: ragged row at row {lineno} "
                            f"(expected {width} fields, got {len(row)})")
        for jcol, cell in enumerate(row):
            v = _parse_float(cell.strip())
            if v is None:
                raise DataError(f"{path}: non-numeric value {cell!r} at row {lineno}, column {jcol + 1}")
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite value at row {lineno}, column {jcol + 1}")
            values[i, jcol] = v
    return DatasetFile(str(path), values, names)


def write_csv(path, values, names=None) -> None:
    """Atomically write a numeric matrix (repr floats, LF endings)."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    lines = []
    if names is not None:
        lines.append(",".join(names))
    for row in values:
        lines.append(",".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)


@dataclass(frozen=True)
class StandardizationRecord:
    """Per-column affine map ``z = (x - shift) / scale`` (sample sd, ddof=1)."""

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "StandardizationRecord":
        return cls(np.zeros(d), np.ones(d))

    @property
    def d(self) -> int:
        return self.shift.shape[0]

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.shift

    @property
    def log_jacobian(self) -> float:
        """Added to a standardized-space log density to get original units."""
        return -float(np.sum(np.log(self.scale)))

    def to_dict(self) -> dict:
        return {"shift": [float(v) for v in self.shift],
                "scale": [float(v) for v in self.scale], "sd_convention": "sample"}

    @classmethod
    def from_dict(cls, data: dict) -> "StandardizationRecord":
        return cls(np.asarray(data["shift"], dtype=float), np.asarray(data["scale"], dtype=float))


def standardize(data, names=None):
    """Center and scale every column to sample sd 1.

    Returns ``(standardized, record)``; zero-variance columns are an error.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise DataError("standardization needs at least two rows")
    if not np.all(np.isfinite(x)):
        raise DataError("data contain non-finite values")
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        j = int(bad[0])
        label = names[j] if names is not None else f"column {j + 1}"
        raise DataError(f"zero-variance {label}; cannot standardize")
    rec = StandardizationRecord(mean, sd)
    return rec.apply(x), rec
