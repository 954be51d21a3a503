"""Formula grammar and design-matrix construction.

Grammar (whitespace ignored)::

    formula := term ("+" term)*
    term    := factor (":" factor)*
    factor  := IDENT ("@" INT)? | "visit" | "1"

``:`` is an elementwise product, ``@k`` a within-subject lag of k visits,
and ``visit`` expands to indicators I(j = k) over the evaluated visit range.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from .dataset import LongitudinalDataset, lag
from .errors import DataError, FormulaError

INTERCEPT = "(Intercept)"
_TOKEN = re.compile(r"\s*(?:(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<int>\d+)|(?P<op>[@:+]))")


@dataclass(frozen=True)
class Factor:
    kind: str  # "column", "visit" or "one"
    name: str = ""
    lag: int = 0

    @property
    def label(self) -> str:
        if self.kind == "one":
            return "1"
        if self.kind == "visit":
            return "visit"
        return f"{self.name}@{self.lag}" if self.lag else self.name


@dataclass(frozen=True)
class Term:
    factors: Tuple[Factor, ...]

    @property
    def is_intercept(self) -> bool:
        return all(f.kind == "one" for f in self.factors)

    @property
    def has_visit(self) -> bool:
        return any(f.kind == "visit" for f in self.factors)

    def without_visit(self) -> Tuple[Factor, ...]:
        return tuple(f for f in self.factors if f.kind not in ("visit", "one"))

    @property
    def label(self) -> str:
        if self.is_intercept:
            return INTERCEPT
        return ":".join(f.label for f in self.factors if f.kind != "one")


@dataclass(frozen=True)
class Formula:
    text: str
    terms: Tuple[Term, ...]

    @property
    def has_intercept(self) -> bool:
        return any(t.is_intercept for t in self.terms)

    @property
    def max_lag(self) -> int:
        return max((f.lag for t in self.terms for f in t.factors), default=0)

    @property
    def column_names(self) -> Tuple[str, ...]:
        return tuple(sorted({f.name for t in self.terms for f in t.factors if f.kind == "column"}))


@lru_cache(maxsize=256)
def parse_formula(text: str) -> Formula:
    tokens = []
    pos = 0
    stripped = text.rstrip()
    while pos < len(stripped):
        m = _TOKEN.match(stripped, pos)
        if not m or m.end() == pos:
            raise FormulaError(f"unexpected character at position {pos} in formula {text!r}")
        kind = m.lastgroup
        tokens.append((kind, m.group(kind)))
        pos = m.end()
    if not tokens:
        raise FormulaError("empty formula")

    idx = 0

    def peek():
        return tokens[idx] if idx < len(tokens) else (None, None)

    def factor() -> Factor:
        nonlocal idx
        kind, value = peek()
        if kind == "int":
            if value != "1":
                raise FormulaError(f"only the constant 1 is allowed as a numeric factor in {text!r}")
            idx += 1
            return Factor("one")
        if kind != "ident":
            raise FormulaError(f"expected a factor in formula {text!r}, found {value!r}")
        idx += 1
        if value == "visit":
            if peek() == ("op", "@"):
                raise FormulaError("'visit' cannot be lagged")
            return Factor("visit")
        depth = 0
        if peek() == ("op", "@"):
            idx += 1
            k, v = peek()
            if k != "int":
                raise FormulaError(f"expected a lag depth after '@' in formula {text!r}")
            idx += 1
            depth = int(v)
            if depth < 1:
                raise FormulaError(f"lag depth must be >= 1 in formula {text!r}")
        return Factor("column", value, depth)

    def term() -> Term:
        nonlocal idx
        fs = [factor()]
        while peek() == ("op", ":"):
            idx += 1
            fs.append(factor())
        if sum(f.kind == "visit" for f in fs) > 1:
            raise FormulaError("'visit' may appear at most once per term")
        return Term(tuple(fs))

    terms = [term()]
    while peek() == ("op", "+"):
        idx += 1
        terms.append(term())
    if idx != len(tokens):
        raise FormulaError(f"trailing tokens in formula {text!r}")
    labels = [t.label for t in terms]
    if len(set(labels)) != len(labels):
        raise FormulaError(f"duplicate term in formula {text!r}")
    return Formula(text, tuple(terms))


@dataclass(frozen=True)
class DesignSpec:
    """A formula plus the response it models.

    ``response`` is a column name; ``"r"`` marks a censoring model, whose rows
    are subjects under follow-up at the previous visit. ``subset`` restricts
    rows to those where the named 0/1 column equals 1 at the current visit.
    """

    formula: str
    response: Optional[str] = None
    subset: Optional[str] = None

    @property
    def parsed(self) -> Formula:
        return parse_formula(self.formula)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    columns: Tuple[str, ...]
    subjects: np.ndarray
    visits: np.ndarray
    response: Optional[np.ndarray]
    shape_nt: Tuple[int, int]

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def dense(self) -> Tuple[np.ndarray, np.ndarray]:
        """Scatter rows into an ``(n, T + 1, p)`` array (zeros elsewhere) plus the row mask."""
        n, T1 = self.shape_nt
        out = np.zeros((n, T1, len(self.columns)))
        mask = np.zeros((n, T1), dtype=bool)
        out[self.subjects, self.visits] = self.values
        mask[self.subjects, self.visits] = True
        return out, mask


def eligible_rows(data: LongitudinalDataset, spec: DesignSpec, visit_range: Tuple[int, int]) -> np.ndarray:
    lo, hi = visit_range
    r = data.r
    elig = np.zeros(r.shape, dtype=bool)
    if spec.response == "r":
        elig[:, lo : hi + 1] = r[:, lo - 1 : hi] == 1
    else:
        elig[:, lo : hi + 1] = r[:, lo : hi + 1] == 1
    if spec.subset is not None:
        elig &= np.nan_to_num(data[spec.subset]) == 1
    return elig


def build_design(
    data: LongitudinalDataset,
    spec: DesignSpec,
    visit_range: Optional[Tuple[int, int]] = None,
) -> DesignMatrix:
    """Evaluate ``spec`` on every eligible (subject, visit) in ``visit_range``.

    Rows are ordered by subject, then visit. An intercept column appears iff
    the formula contains ``1``; a standalone ``visit`` term drops its first
    level when an intercept is present.
    """
    formula = spec.parsed
    lo, hi = visit_range if visit_range is not None else (1, data.T)
    if not (0 <= lo <= hi <= data.T):
        raise DataError(f"visit range ({lo}, {hi}) outside 0..{data.T}")
    if spec.response == "r" and lo < 1:
        raise DataError("censoring designs start at visit 1 or later")
    for t in formula.terms:
        for f in t.factors:
            if f.kind == "column":
                if f.name not in data:
                    raise DataError(f"unknown column {f.name!r} in formula {formula.text!r}")
                if f.lag > lo:
                    raise DataError(f"lag {f.lag} of column {f.name!r} is out of range at visit {lo}")
    if spec.response is not None and spec.response not in data:
        raise DataError(f"unknown response column {spec.response!r}")

    elig = eligible_rows(data, spec, (lo, hi))
    subjects, visits = np.nonzero(elig)
    if subjects.size == 0:
        raise DataError(f"empty design: no eligible rows for formula {formula.text!r}")

    cache = {}

    def factor_values(f: Factor) -> np.ndarray:
        key = (f.name, f.lag)
        if key not in cache:
            src = lag(data, f.name, f.lag) if f.lag else data[f.name]
            cache[key] = src[subjects, visits]
        return cache[key]

    term_labels = {t.label for t in formula.terms}
    names: List[str] = []
    cols: List[np.ndarray] = []
    ones = np.ones(subjects.size)
    for t in formula.terms:
        base = ones
        for f in t.factors:
            if f.kind == "column":
                base = base * factor_values(f)
        if not t.has_visit:
            names.append(t.label)
            cols.append(base)
            continue
        rest = t.without_visit()
        parent = ":".join(f.label for f in rest) if rest else INTERCEPT
        levels = list(range(lo, hi + 1))
        if formula.has_intercept and parent in term_labels:
            levels = levels[1:]
        for k in levels:
            names.append(
                ":".join(f"visit[{k}]" if f.kind == "visit" else f.label for f in t.factors if f.kind != "one")
            )
            cols.append(base * (visits == k))
    if len(set(names)) != len(names):
        raise FormulaError(f"formula {formula.text!r} produces duplicate columns")
    values = np.column_stack(cols) if cols else np.empty((subjects.size, 0))
    if np.isnan(values).any():
        bad = np.argwhere(np.isnan(values))[0]
        i, j = subjects[bad[0]], visits[bad[0]]
        raise DataError(
            f"missing value in design column {names[bad[1]]!r} at subject {data.ids[i]}, visit {j}"
        )
    response = None
    if spec.response is not None:
        response = data[spec.response][subjects, visits]
        if spec.response == "r":
            response = np.asarray(data.r[subjects, visits], dtype=np.float64)
        elif np.isnan(response).any():
            raise DataError(f"missing response {spec.response!r} on eligible rows")
    values.setflags(write=False)
    return DesignMatrix(values, tuple(names), subjects, visits, response, (data.n, data.T + 1))
