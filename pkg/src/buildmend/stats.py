"""Chi-square test of independence and the Friedman rank test.

Both statistics are accumulated in exact rational arithmetic and only
converted to ``float`` at the end, so results do not depend on summation
order. Upper-tail probabilities come from the regularized upper incomplete
gamma function implemented here (series / continued-fraction split).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from .errors import DegenerateTableError, InsufficientConditionsError, PreconditionError

_EPS = 1e-16
_MAX_ITER = 100_000
_TINY = 1e-300


def _gamma_series(a: float, x: float) -> float:
    """Lower regularized gamma P(a, x) by its power series; valid for x < a + 1."""
    ap = a
    term = 1.0 / a
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    """Upper regularized gamma Q(a, x) by modified Lentz; valid for x >= a + 1."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise PreconditionError("shape parameter must be positive")
    if x < 0:
        raise PreconditionError("x must be non-negative")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def chi2_sf(statistic: float, df: int) -> float:
    """Survival function of the Chi-square distribution."""
    if statistic <= 0:
        return 1.0
    return min(1.0, max(0.0, gammaincc(df / 2.0, statistic / 2.0)))


@dataclass
class TestResult:
    statistic: float
    degrees_of_freedom: int
    p_value: float
    method: str
    tie_correction_applied: bool = False
    uncorrected_statistic: float | None = None
    notes: list[str] = field(default_factory=list)

    __test__ = False  # keep pytest from collecting this class


@dataclass
class ContingencyTable:
    row_labels: list[str]
    col_labels: list[str]
    counts: list[list[int]]

    def __post_init__(self):
        r, c = len(self.counts), len(self.counts[0]) if self.counts else 0
        if r < 2 or c < 2:
            raise PreconditionError(f"contingency table must be at least 2x2, got {r}x{c}")
        if any(len(row) != c for row in self.counts):
            raise PreconditionError("ragged contingency table")
        for row in self.counts:
            for v in row:
                if isinstance(v, bool) or not isinstance(v, int) and not float(v).is_integer():
                    raise PreconditionError(f"counts must be integers, got {v!r}")
                if v < 0:
                    raise PreconditionError("counts must be non-negative")
        self.counts = [[int(v) for v in row] for row in self.counts]
        if not self.row_labels:
            self.row_labels = [f"r{i}" for i in range(r)]
        if not self.col_labels:
            self.col_labels = [f"c{j}" for j in range(c)]
        if len(self.row_labels) != r or len(self.col_labels) != c:
            raise PreconditionError("label count does not match table shape")
        if sum(map(sum, self.counts)) <= 0:
            raise PreconditionError("grand total must be positive")

    @classmethod
    def from_rows(cls, counts: Sequence[Sequence[int]], row_labels=None, col_labels=None):
        return cls(list(row_labels or []), list(col_labels or []), [list(r) for r in counts])

    @classmethod
    def from_csv(cls, path: Path | str) -> "ContingencyTable":
        """Header row holds column labels (after a leading row-label cell)."""
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(cell.strip() for cell in r)]
        if len(rows) < 3:
            raise PreconditionError(f"{path}: need a header and at least two data rows")
        header = rows[0]
        labelled = not _is_number(rows[1][0])
        col_labels = header[1:] if labelled else header
        row_labels, counts = [], []
        for i, r in enumerate(rows[1:]):
            row_labels.append(r[0] if labelled else f"r{i}")
            values = r[1:] if labelled else r
            counts.append([int(float(v)) for v in values])
        return cls(row_labels, col_labels, counts)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _as_table(table) -> ContingencyTable:
    if isinstance(table, ContingencyTable):
        return table
    return ContingencyTable.from_rows(table)


def expected_counts(table) -> list[list[Fraction]]:
    t = _as_table(table)
    rows = [sum(r) for r in t.counts]
    cols = [sum(c) for c in zip(*t.counts)]
    grand = sum(rows)
    return [[Fraction(rt * ct, grand) for ct in cols] for rt in rows]


def chi_square_independence(table) -> TestResult:
    """Pearson's Chi-square test of independence, without continuity correction."""
    t = _as_table(table)
    expected = expected_counts(t)
    if any(e == 0 for row in expected for e in row):
        raise DegenerateTableError("an expected cell count is zero (empty row or column)")
    stat = Fraction(0)
    for obs_row, exp_row in zip(t.counts, expected):
        for o, e in zip(obs_row, exp_row):
            stat += (o - e) ** 2 / e
    df = (len(t.counts) - 1) * (len(t.counts[0]) - 1)
    value = float(stat)
    return TestResult(statistic=value, degrees_of_freedom=df, p_value=chi2_sf(value, df), method="chi-square")


@dataclass
class RankMatrix:
    """Blocks (rows, e.g. projects) by conditions (columns) of real observations."""

    observations: list[list[float]]
    block_labels: list[str] = field(default_factory=list)
    condition_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.observations:
            raise PreconditionError("rank matrix needs at least one block")
        k = len(self.observations[0])
        if any(len(b) != k for b in self.observations):
            raise PreconditionError("every block must observe every condition")
        for b in self.observations:
            for v in b:
                if isinstance(v, float) and math.isnan(v):
                    raise PreconditionError("NaN observation")

    @property
    def n(self) -> int:
        return len(self.observations)

    @property
    def k(self) -> int:
        return len(self.observations[0])

    @classmethod
    def from_conditions(cls, columns: dict[str, Sequence[float]], block_labels=None) -> "RankMatrix":
        """Build from one sequence per condition (each sequence indexed by block)."""
        names = list(columns)
        n = len(columns[names[0]])
        blocks = [[columns[c][i] for c in names] for i in range(n)]
        return cls(blocks, list(block_labels or []), names)

    def ranks(self) -> list[list[Fraction]]:
        """Within-block ranks, 1 = smallest; ties share their mean rank."""
        out = []
        for block in self.observations:
            order = sorted(range(self.k), key=lambda j: block[j])
            ranks = [Fraction(0)] * self.k
            i = 0
            while i < self.k:
                j = i
                while j + 1 < self.k and block[order[j + 1]] == block[order[i]]:
                    j += 1
                mean = Fraction(i + j + 2, 2)
                for t in range(i, j + 1):
                    ranks[order[t]] = mean
                i = j + 1
            out.append(ranks)
        return out

    def rank_sums(self) -> list[Fraction]:
        return [sum(col, Fraction(0)) for col in zip(*self.ranks())]

    def tie_term(self) -> int:
        """Sum over blocks and tie groups of t^3 - t."""
        total = 0
        for block in self.observations:
            counts: dict = {}
            for v in block:
                counts[v] = counts.get(v, 0) + 1
            total += sum(t ** 3 - t for t in counts.values() if t > 1)
        return total


def friedman(matrix) -> TestResult:
    """Friedman test over blocks x conditions, with the standard tie correction."""
    m = matrix if isinstance(matrix, RankMatrix) else RankMatrix([list(b) for b in matrix])
    n, k = m.n, m.k
    if k < 3:
        raise InsufficientConditionsError(f"Friedman test needs at least 3 conditions, got {k}")
    if n < 2:
        raise PreconditionError(f"Friedman test needs at least 2 blocks, got {n}")
    sums = m.rank_sums()
    raw = Fraction(12, n * k * (k + 1)) * sum(r * r for r in sums) - 3 * n * (k + 1)
    ties = m.tie_term()
    divisor = 1 - Fraction(ties, n * (k ** 3 - k))
    corrected = ties > 0 and divisor > 0
    stat = raw / divisor if corrected else raw
    value = float(stat)
    return TestResult(
        statistic=value,
        degrees_of_freedom=k - 1,
        p_value=chi2_sf(value, k - 1),
        method="friedman",
        tie_correction_applied=corrected,
        uncorrected_statistic=float(raw),
    )
