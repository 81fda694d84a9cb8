"""Column-oriented datasets and CSV ingestion."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ROLES = ("outcome", "endogenous", "conditioning", "exogenous", "factor_panel", "treatment")

_MISSING = {"", "na", "nan", "null", "none", "."}


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """n observation rows stored as named float columns.

    ``roles`` maps a role name to the column names playing it; it is
    informational and used by config-driven model builders.
    """

    columns: dict[str, np.ndarray]
    roles: dict[str, list[str]] = field(default_factory=dict)
    dropped_rows: list[int] = field(default_factory=list)

    def __post_init__(self):
        cols = {}
        n = None
        for name, values in self.columns.items():
            arr = np.asarray(values, dtype=float).reshape(-1)
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise DataError(f"column {name!r} has {arr.size} rows, expected {n}")
            cols[name] = arr
        self.columns = cols

    @property
    def n(self) -> int:
        return next(iter(self.columns.values())).size if self.columns else 0

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def matrix(self, names) -> np.ndarray:
        return np.column_stack([self.columns[c] for c in names]) if names else np.empty((self.n, 0))

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset({k: v[rows] for k, v in self.columns.items()}, dict(self.roles))

    def head(self, count: int) -> "Dataset":
        return self.take(np.arange(count))

    def tail(self, start: int) -> "Dataset":
        return self.take(np.arange(start, self.n))

    def with_columns(self, **new) -> "Dataset":
        cols = dict(self.columns)
        cols.update(new)
        return Dataset(cols, dict(self.roles))

    def split_by(self, column: str) -> tuple["Dataset", "Dataset"]:
        """Split on a 0/1 indicator column into (zeros, ones)."""
        x = self.columns[column]
        if not np.all((x == 0) | (x == 1)):
            raise DataError(f"column {column!r} is not a 0/1 indicator")
        return self.take(np.flatnonzero(x == 0)), self.take(np.flatnonzero(x == 1))


def ingest_csv(path, roles: dict | None = None) -> Dataset:
    """Read a numeric CSV with a header row.

    Rows holding a missing cell are dropped and their (0-based, data-row)
    indices recorded on ``Dataset.dropped_rows``. Non-numeric cells, ragged
    rows, duplicate or missing header names raise ``DataError``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, no header row") from None
        header = [h.strip() for h in header]
        if any(not h for h in header):
            raise DataError(f"{path}: blank column name in header")
        seen = set()
        for h in header:
            if h in seen:
                raise DataError(f"{path}: duplicate column name {h!r}")
            seen.add(h)
        rows, dropped = [], []
        for line_no, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise DataError(f"{path}: line {line_no} has {len(raw)} fields, expected {len(header)}")
            values = []
            missing = False
            for name, cell in zip(header, raw):
                cell = cell.strip()
                if cell.lower() in _MISSING:
                    missing = True
                    values.append(math.nan)
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: non-numeric cell {cell!r} at line {line_no}, column {name!r}"
                    ) from None
            if missing:
                dropped.append(len(rows) + len(dropped))
                continue
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no complete data rows")
    arr = np.asarray(rows, dtype=float)
    roles = {k: ([v] if isinstance(v, str) else list(v)) for k, v in (roles or {}).items()}
    for role, cols in roles.items():
        for c in cols:
            if c not in header:
                raise DataError(f"{path}: role {role!r} names missing column {c!r}")
    if dropped:
        log.warning("%s: dropped %d rows with missing values: %s", path, len(dropped), dropped)
    ds = Dataset({h: arr[:, j] for j, h in enumerate(header)}, roles)
    ds.dropped_rows = dropped
    return ds
