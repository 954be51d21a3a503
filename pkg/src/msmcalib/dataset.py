"""Longitudinal cohort data model and long-format CSV I/O.

Every column is held as a dense ``(n, T + 1)`` float array indexed by
(subject, visit), with NaN for values not recorded after dropout.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from os import PathLike
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError

TREATMENT_KINDS = ("ordinal3", "binary", "continuous")
_INDICATOR_COLUMNS = ("r", "a0", "a1")
_RESERVED = ("id", "visit", "r", "y", "a0", "a1", "a")


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Per-subject, per-visit records with monotone dropout.

    ``columns`` maps a column name to an ``(n, T + 1)`` array; ``r`` is the
    observation indicator. Treatment columns are ``a0``/``a1`` (ordinal3 and
    binary) or ``a`` (continuous). Any other column is a covariate.
    """

    ids: Tuple[str, ...]
    treatment_kind: str
    columns: Mapping[str, np.ndarray]
    column_order: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.treatment_kind not in TREATMENT_KINDS:
            raise DataError(f"unknown treatment kind {self.treatment_kind!r}")
        cols = {name: _readonly(v) for name, v in self.columns.items()}
        object.__setattr__(self, "columns", cols)
        if not self.column_order:
            object.__setattr__(self, "column_order", tuple(cols))
        shapes = {v.shape for v in cols.values()}
        if len(shapes) != 1:
            raise DataError("all columns must share the (n, T+1) shape")
        (shape,) = shapes
        if shape[0] != len(self.ids):
            raise DataError("column rows do not match the number of subject ids")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("subject ids must be unique")
        if "r" not in cols or "y" not in cols:
            raise DataError("dataset requires 'r' and 'y' columns")
        needed = ("a",) if self.treatment_kind == "continuous" else ("a0",)
        for name in needed:
            if name not in cols:
                raise DataError(f"{self.treatment_kind} treatment requires column {name!r}")
        _validate(self)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def T(self) -> int:
        return next(iter(self.columns.values())).shape[1] - 1

    @property
    def r(self) -> np.ndarray:
        return self.columns["r"]

    @property
    def covariates(self) -> Tuple[str, ...]:
        return tuple(c for c in self.column_order if c not in _RESERVED)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def with_columns(self, **new: np.ndarray) -> "LongitudinalDataset":
        """Return a copy with columns added or replaced; values after dropout are blanked."""
        cols = dict(self.columns)
        order = list(self.column_order)
        observed = self.r == 1
        for name, values in new.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape != self.r.shape:
                raise DataError(f"column {name!r} has shape {values.shape}, expected {self.r.shape}")
            cols[name] = np.where(observed, values, np.nan)
            if name not in order:
                order.append(name)
        return LongitudinalDataset(self.ids, self.treatment_kind, cols, tuple(order))

    def take(self, index: Sequence[int], relabel: bool = True) -> "LongitudinalDataset":
        """Subjects at ``index`` (repeats allowed); repeated ids get ``#k`` suffixes."""
        index = np.asarray(index, dtype=np.int64)
        ids = [self.ids[i] for i in index]
        if relabel:
            ids = [f"{sid}#{k}" for k, sid in enumerate(ids)]
        cols = {name: v[index] for name, v in self.columns.items()}
        return LongitudinalDataset(tuple(ids), self.treatment_kind, cols, self.column_order)


def _where(data: LongitudinalDataset, mask: np.ndarray) -> Tuple[str, int]:
    i, j = np.argwhere(mask)[0]
    return data.ids[i], int(j)


def _validate(data: LongitudinalDataset) -> None:
    r = data.r
    if np.isnan(r).any():
        sid, j = _where(data, np.isnan(r))
        raise DataError(f"missing observation indicator at subject {sid}, visit {j}")
    if not np.isin(r, (0.0, 1.0)).all():
        sid, j = _where(data, ~np.isin(r, (0.0, 1.0)))
        raise DataError(f"observation indicator must be 0/1 at subject {sid}, visit {j}")
    if (r[:, 0] != 1).any():
        sid, _ = _where(data, (r[:, :1] != 1))
        raise DataError(f"subject {sid} is not observed at baseline (visit 0)")
    rising = (r[:, 1:] > r[:, :-1])
    if rising.any():
        i, j = np.argwhere(rising)[0]
        raise DataError(f"non-monotone dropout at subject {data.ids[i]}, visit {j + 1}")
    observed = r == 1
    for name in data.column_order:
        v = data.columns[name]
        bad = observed & np.isnan(v)
        if bad.any():
            sid, j = _where(data, bad)
            raise DataError(f"missing value in column {name!r} at subject {sid}, visit {j} (r = 1)")
        if name in ("a0", "a1"):
            bad = observed & ~np.isin(v, (0.0, 1.0))
            if bad.any():
                sid, j = _where(data, bad)
                raise DataError(f"column {name!r} must be 0/1 at subject {sid}, visit {j}")
    if "a0" in data.columns and "a1" in data.columns:
        bad = observed & (data.columns["a1"] == 1) & (data.columns["a0"] == 0)
        if bad.any():
            sid, j = _where(data, bad)
            raise DataError(f"ordinal coding violated at subject {sid}, visit {j}")


def _parse_float(text: str, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {line}, column {column!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}, column {column!r}: non-finite value {text!r}")
    return value


def load_long(
    path: Union[str, PathLike],
    schema: Optional[Mapping[str, str]] = None,
    treatment_kind: Optional[str] = None,
) -> LongitudinalDataset:
    """Read a long-format CSV (one row per subject and visit).

    ``schema`` maps canonical names (``id``, ``visit``, ``r``, ``y``, ``a0``,
    ``a1``, ``a``) to the header names used in the file. Records missing
    after dropout may be omitted entirely. ``treatment_kind`` defaults to
    continuous when an ``a`` column exists, ordinal3 when ``a1`` exists and
    binary otherwise.
    """
    rename = {v: k for k, v in (schema or {}).items()}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [rename.get(h.strip(), h.strip()) for h in header]
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        for required in ("id", "visit", "r", "y"):
            if required not in header:
                raise DataError(f"{path}: missing required column {required!r}")
        records = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {line_no}: expected {len(header)} fields, found {len(row)}")
            records.append((line_no, [c.strip() for c in row]))

    if treatment_kind is None:
        treatment_kind = "continuous" if "a" in header else ("ordinal3" if "a1" in header else "binary")
    value_cols = [h for h in header if h not in ("id", "visit")]
    ids: Dict[str, int] = {}
    parsed = []
    max_visit = 0
    for line_no, row in records:
        rec = dict(zip(header, row))
        sid = rec["id"]
        if not sid:
            raise DataError(f"line {line_no}, column 'id': empty subject id")
        try:
            visit = int(rec["visit"])
        except ValueError:
            raise DataError(f"line {line_no}, column 'visit': cannot parse {rec['visit']!r} as an integer") from None
        if visit < 0:
            raise DataError(f"line {line_no}, column 'visit': negative visit {visit}")
        max_visit = max(max_visit, visit)
        ids.setdefault(sid, len(ids))
        values = {}
        for c in value_cols:
            text = rec[c]
            values[c] = np.nan if text == "" else _parse_float(text, line_no, c)
        parsed.append((line_no, sid, visit, values))

    n, T1 = len(ids), max_visit + 1
    if n == 0:
        raise DataError(f"{path}: no records")
    cols = {c: np.full((n, T1), np.nan) for c in value_cols}
    cols["r"][:] = 0.0
    seen = np.zeros((n, T1), dtype=bool)
    for line_no, sid, visit, values in parsed:
        i = ids[sid]
        if seen[i, visit]:
            raise DataError(f"line {line_no}: duplicate record for subject {sid}, visit {visit}")
        seen[i, visit] = True
        for c, v in values.items():
            cols[c][i, visit] = v
        if np.isnan(values["r"]):
            raise DataError(f"line {line_no}, column 'r': observation indicator is required")
    return LongitudinalDataset(tuple(ids), treatment_kind, cols, tuple(value_cols))


def _format_value(name: str, value: float) -> str:
    if math.isnan(value):
        return ""
    if name in _INDICATOR_COLUMNS:
        return str(int(value))
    return repr(float(value))


def write_long(data: LongitudinalDataset, path: Union[str, PathLike]) -> None:
    """Write the canonical long format: all visits for every subject, in
    subject order then visit order, floats in shortest round-trip form."""
    treat = ["a"] if data.treatment_kind == "continuous" else [c for c in ("a0", "a1") if c in data]
    head = ["r", "y"] + treat
    order = head + [c for c in data.column_order if c not in head]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "visit"] + order)
        for i, sid in enumerate(data.ids):
            for j in range(data.T + 1):
                w.writerow([sid, j] + [_format_value(c, data.columns[c][i, j]) for c in order])


def lag(data: LongitudinalDataset, column: str, depth: int) -> np.ndarray:
    """Values of ``column`` shifted ``depth`` visits within subject.

    Entry ``[i, j]`` holds the value at visit ``j - depth``; visits below
    ``depth`` are NaN and must not be consumed (`build_design` rejects them).
    """
    if depth < 1:
        raise DataError(f"lag depth must be >= 1, got {depth}")
    src = data[column]
    out = np.full(src.shape, np.nan)
    if depth <= data.T:
        out[:, depth:] = src[:, :-depth]
    return out


def cumulative(data: LongitudinalDataset, terms: Mapping[str, float]) -> np.ndarray:
    """Running sum from visit 0 through visit j of ``sum_c coef_c * column_c``."""
    total = np.zeros(data.r.shape)
    for name, coef in terms.items():
        total = total + coef * np.nan_to_num(data[name])
    out = np.cumsum(total, axis=1)
    return np.where(data.r == 1, out, np.nan)


def parse_linear_terms(expr: str) -> Dict[str, float]:
    """Parse ``"a0-a1"`` or ``"2*x1 + a1"`` into ``{column: coefficient}``."""
    term = r"([+-]?)(?:(\d+(?:\.\d*)?)\*)?([A-Za-z_][A-Za-z0-9_]*)"
    text = re.sub(r"\s*([-+*])\s*", r"\1", expr.strip())
    if not re.fullmatch(f"(?:{term})+", text):
        raise DataError(f"cannot parse linear expression {expr!r}")
    pieces = re.findall(term, text)
    if any(not sign for sign, _, _ in pieces[1:]):
        raise DataError(f"cannot parse linear expression {expr!r}")
    out: Dict[str, float] = {}
    for sign, coef, name in pieces:
        value = float(coef) if coef else 1.0
        out[name] = out.get(name, 0.0) + (-value if sign == "-" else value)
    return out


def from_frame(
    ids: Iterable[str], treatment_kind: str, columns: Mapping[str, np.ndarray]
) -> LongitudinalDataset:
    """Build a dataset from dense arrays; entries with r = 0 are blanked."""
    r = np.asarray(columns["r"], dtype=np.float64)
    cols = {k: np.where(r == 1, np.asarray(v, dtype=np.float64), np.nan) if k != "r" else r for k, v in columns.items()}
    return LongitudinalDataset(tuple(str(i) for i in ids), treatment_kind, cols, tuple(columns))
