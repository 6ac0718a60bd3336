"""Finite-population data model, totals and CSV persistence."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np


class PopulationError(ValueError):
    """Raised when population data violate the data-model invariants."""


class UnitRecord(NamedTuple):
    id: int
    y: float
    x: tuple[float, ...]
    stratum: int | None = None


def fsum(values) -> float:
    """Compensated (exactly rounded) sum of an iterable or array."""
    return math.fsum(np.asarray(values, dtype=float).ravel().tolist())


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Population:
    """A fixed finite population.

    Attributes
    ----------
    ids : (N,) int array of unique labels
    y : (N,) survey variable
    x : (N, p) auxiliary features, row-major
    strata : (N,) 0-based consecutive stratum labels, or None
    """

    ids: np.ndarray
    y: np.ndarray
    x: np.ndarray
    strata: np.ndarray | None = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        N = len(y)
        if N < 1:
            raise PopulationError("population must contain at least one unit")
        if len(ids) != N or x.shape[0] != N:
            raise PopulationError(
                f"length mismatch: ids={len(ids)}, y={N}, x rows={x.shape[0]}"
            )
        if len(np.unique(ids)) != N:
            vals, counts = np.unique(ids, return_counts=True)
            raise PopulationError(f"duplicate id {vals[counts > 1][0]}")
        if not np.all(np.isfinite(y)):
            raise PopulationError(f"non-finite y at row {int(np.argmin(np.isfinite(y)))}")
        if not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x))[0]
            raise PopulationError(f"non-finite x{bad[1] + 1} at row {bad[0]}")
        strata = self.strata
        if strata is not None:
            strata = normalize_strata(strata)
            if len(strata) != N:
                raise PopulationError("strata length does not match population size")
        object.__setattr__(self, "ids", _readonly(ids))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "strata", None if strata is None else _readonly(strata))

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_strata(self) -> int:
        return 1 if self.strata is None else int(self.strata.max()) + 1

    def stratum_sizes(self) -> np.ndarray:
        if self.strata is None:
            return np.array([self.N])
        return np.bincount(self.strata, minlength=self.n_strata)

    @property
    def Y(self) -> float:
        return fsum(self.y)

    @property
    def units(self) -> list[UnitRecord]:
        strata = self.strata if self.strata is not None else [None] * self.N
        return [
            UnitRecord(int(i), float(v), tuple(map(float, row)), None if h is None else int(h))
            for i, v, row, h in zip(self.ids, self.y, self.x, strata)
        ]

    @classmethod
    def from_units(cls, units: Iterable[UnitRecord]) -> "Population":
        units = list(units)
        if not units:
            raise PopulationError("population must contain at least one unit")
        widths = {len(u.x) for u in units}
        if len(widths) != 1:
            raise PopulationError(f"feature vectors of unequal length {sorted(widths)}")
        has_strata = [u.stratum is not None for u in units]
        if any(has_strata) and not all(has_strata):
            raise PopulationError("stratum given for some units but not all")
        return cls(
            ids=[u.id for u in units],
            y=[u.y for u in units],
            x=np.array([u.x for u in units], dtype=float).reshape(len(units), -1),
            strata=[u.stratum for u in units] if all(has_strata) else None,
        )

    def with_y(self, y) -> "Population":
        """Same units and features with a different response vector."""
        return Population(self.ids, y, self.x, self.strata)


def normalize_strata(labels) -> np.ndarray:
    """Map arbitrary integer labels to 0-based consecutive integers (sorted order)."""
    labels = np.asarray(labels).ravel()
    _, codes = np.unique(labels, return_inverse=True)
    return codes.astype(np.int64)


def population_totals(pop: Population) -> tuple[float, np.ndarray]:
    """Population totals ``(Y, X)`` by compensated summation."""
    X = np.array([fsum(pop.x[:, k]) for k in range(pop.p)])
    return pop.Y, X


def _parse_float(cell: str, row: int, column: str) -> float:
    try:
        v = float(cell)
    except (TypeError, ValueError):
        raise PopulationError(f"row {row}, column {column!r}: non-numeric value {cell!r}") from None
    if not math.isfinite(v):
        raise PopulationError(f"row {row}, column {column!r}: non-finite value {cell!r}")
    return v


def load_population(
    path: str | Path,
    schema: Mapping[str, str | Sequence[str]] | None = None,
) -> Population:
    """Read a population CSV.

    The default layout is ``id,stratum,y,x1,...,xp`` with the stratum column
    optional. ``schema`` may rename columns: keys ``id``, ``y``, ``stratum``
    map to single column names and ``x`` to a list of feature columns.
    Rows are 1-based data-row numbers in error messages.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PopulationError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    schema = dict(schema or {})
    id_col = schema.get("id", "id")
    y_col = schema.get("y", "y")
    stratum_col = schema.get("stratum", "stratum")
    if "x" in schema:
        x_cols = list(schema["x"])
    else:
        x_cols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
        x_cols.sort(key=lambda h: int(h[1:]))
    for col in [id_col, y_col, *x_cols]:
        if col not in header:
            raise PopulationError(f"{path}: missing column {col!r}")
    if not x_cols:
        raise PopulationError(f"{path}: no feature columns x1..xp")
    pos = {h: k for k, h in enumerate(header)}
    has_stratum = stratum_col in pos

    ids, y, x, strata = [], [], [], []
    seen: dict[int, int] = {}
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise PopulationError(f"row {r}: expected {len(header)} cells, found {len(row)}")
        raw_id = row[pos[id_col]].strip()
        try:
            uid = int(raw_id)
        except ValueError:
            raise PopulationError(f"row {r}, column {id_col!r}: non-integer id {raw_id!r}") from None
        if uid in seen:
            raise PopulationError(
                f"row {r}, column {id_col!r}: duplicate id {uid} (first seen in row {seen[uid]})"
            )
        seen[uid] = r
        ids.append(uid)
        y.append(_parse_float(row[pos[y_col]], r, y_col))
        x.append([_parse_float(row[pos[c]], r, c) for c in x_cols])
        if has_stratum:
            raw = row[pos[stratum_col]].strip()
            try:
                strata.append(int(raw))
            except ValueError:
                raise PopulationError(
                    f"row {r}, column {stratum_col!r}: non-integer stratum {raw!r}"
                ) from None
    if not ids:
        raise PopulationError(f"{path}: no data rows")
    return Population(ids, y, np.array(x), strata if has_stratum else None)


def save_population(pop: Population, path: str | Path) -> None:
    """Write ``pop`` in the layout read by :func:`load_population`.

    Floats are written with ``repr`` so that a reload is bit-exact.
    """
    header = ["id"] + (["stratum"] if pop.strata is not None else []) + ["y"]
    header += [f"x{k + 1}" for k in range(pop.p)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(pop.N):
            row = [str(int(pop.ids[i]))]
            if pop.strata is not None:
                row.append(str(int(pop.strata[i])))
            row.append(repr(float(pop.y[i])))
            row.extend(repr(float(v)) for v in pop.x[i])
            w.writerow(row)
