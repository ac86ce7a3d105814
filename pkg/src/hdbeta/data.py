"""Panel containers and design-matrix construction.

Observations are stored as flat arrays sorted by (level, year, school), with
0-based integer indices. User-facing labels (level values, years, school ids)
are kept alongside so that outputs can be written back with the original keys.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

if TYPE_CHECKING:
    from .model import ModelSpec

__all__ = [
    "PanelError",
    "PanelIndex",
    "ObservationTable",
    "RawScoreTable",
    "build_table",
    "covariate_standardize",
    "read_panel_csv",
]

LEVEL_COLUMN = "level"
SCHOOL_COLUMN = "school_id"
YEAR_COLUMN = "year"


class PanelError(ValueError):
    """Raised when panel data violate a structural requirement."""


@dataclass(frozen=True, order=True)
class PanelIndex:
    """1-based (level, school, year) key of one observation."""

    level: int
    school: int
    year: int


def _dense_codes(values) -> tuple[np.ndarray, list]:
    values = [v.item() if isinstance(v, np.generic) else v for v in values]
    labels = sorted(set(values))
    lookup = {v: k for k, v in enumerate(labels)}
    return np.array([lookup[v] for v in values], dtype=np.int64), labels


@dataclass(frozen=True)
class ObservationTable:
    """Balanced panel of (0,1) responses with mean and precision covariates.

    Attributes
    ----------
    y : (n,) responses strictly inside (0, 1).
    X : (n, p) mean covariates, first column is the intercept.
    Q : (n, q) precision covariates, first column is the intercept.
    level, school, year : (n,) 0-based indices.
    n_levels, n_years : panel dimensions (kept explicitly so an empty table
        still carries its shape).
    mean_names, precision_names : column names of X and Q.
    """

    y: np.ndarray
    X: np.ndarray
    Q: np.ndarray
    level: np.ndarray
    school: np.ndarray
    year: np.ndarray
    n_levels: int
    n_years: int
    mean_names: tuple[str, ...]
    precision_names: tuple[str, ...]
    level_labels: tuple = ()
    year_labels: tuple = ()
    school_labels: tuple = ()  # per level: tuple of original school ids
    cell: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        n = y.shape[0]
        if n == 0:
            X = X.reshape(0, len(self.mean_names))
            Q = Q.reshape(0, len(self.precision_names))
        if X.shape != (n, len(self.mean_names)) or Q.shape != (n, len(self.precision_names)):
            raise PanelError("covariate arrays do not match response length or names")
        if X.shape[1] < 1 or Q.shape[1] < 1:
            raise PanelError("p and q must both be at least 1 (intercept)")
        if n and (not np.all(X[:, 0] == 1.0) or not np.all(Q[:, 0] == 1.0)):
            raise PanelError("first covariate column must be the intercept (all ones)")
        bad = np.flatnonzero(~((y > 0.0) & (y < 1.0)))
        if bad.size:
            k = bad[0]
            raise PanelError(
                f"response {y[k]!r} outside (0,1) at "
                f"{PanelIndex(int(self.level[k]) + 1, int(self.school[k]) + 1, int(self.year[k]) + 1)}"
            )
        for name, arr in (("y", y), ("X", X), ("Q", Q)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("level", "school", "year"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if n and (self.level.max() >= self.n_levels or self.year.max() >= self.n_years):
            raise PanelError("index out of range for declared panel dimensions")
        cell = self.level * self.n_years + self.year
        cell.setflags(write=False)
        object.__setattr__(self, "cell", cell)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Q.shape[1]

    @property
    def n_cells(self) -> int:
        return self.n_levels * self.n_years

    def schools_per_level(self) -> np.ndarray:
        counts = np.zeros(self.n_levels, dtype=np.int64)
        for i in range(self.n_levels):
            counts[i] = np.unique(self.school[self.level == i]).size
        return counts

    def index(self, k: int) -> PanelIndex:
        return PanelIndex(int(self.level[k]) + 1, int(self.school[k]) + 1, int(self.year[k]) + 1)

    def select_covariates(self, mean_names: Sequence[str], precision_names: Sequence[str]) -> "ObservationTable":
        """Return a table keeping only the named non-intercept columns."""
        def pick(names, have, arr):
            cols = [0]
            for nm in names:
                if nm not in have:
                    raise PanelError(f"unknown covariate {nm!r}")
                cols.append(have.index(nm))
            return arr[:, cols], (have[0],) + tuple(names)

        X, mnames = pick(mean_names, self.mean_names, self.X)
        Q, qnames = pick(precision_names, self.precision_names, self.Q)
        return ObservationTable(
            self.y, X, Q, self.level, self.school, self.year, self.n_levels, self.n_years,
            mnames, qnames, self.level_labels, self.year_labels, self.school_labels,
        )

    def to_frame(self) -> pd.DataFrame:
        """Flat frame with original labels, response and non-intercept covariates."""
        lev = list(self.level_labels) or list(range(1, self.n_levels + 1))
        yrs = list(self.year_labels) or list(range(1, self.n_years + 1))
        if self.school_labels:
            sch = [self.school_labels[i][j] for i, j in zip(self.level, self.school)]
        else:
            sch = [f"{i + 1}-{j + 1}" for i, j in zip(self.level, self.school)]
        out = {
            LEVEL_COLUMN: [lev[i] for i in self.level],
            SCHOOL_COLUMN: sch,
            YEAR_COLUMN: [yrs[t] for t in self.year],
            "y": self.y,
        }
        for c, nm in enumerate(self.mean_names[1:], start=1):
            out[nm] = self.X[:, c]
        for c, nm in enumerate(self.precision_names[1:], start=1):
            if nm not in out:
                out[nm] = self.Q[:, c]
        return pd.DataFrame(out)


@dataclass(frozen=True)
class RawScoreTable:
    """Raw school average scores on [0, s_max] keyed like an ObservationTable."""

    scores: np.ndarray
    level: np.ndarray
    school: np.ndarray
    year: np.ndarray
    s_max: float = 120.0

    def __post_init__(self):
        if not self.s_max > 0:
            raise PanelError("s_max must be positive")
        w = np.asarray(self.scores, dtype=float)
        if np.any(~np.isfinite(w)) or np.any(w < 0) or np.any(w > self.s_max):
            k = int(np.flatnonzero(~((w >= 0) & (w <= self.s_max)))[0])
            raise PanelError(f"raw score {w[k]!r} outside [0, {self.s_max}] at row {k}")
        object.__setattr__(self, "scores", w)
        for name in ("level", "school", "year"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))


def covariate_standardize(values) -> np.ndarray:
    """z-score a vector with the sample (n-1) standard deviation."""
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("need at least two values to standardize")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise ValueError("zero variance covariate cannot be standardized")
    return (x - x.mean()) / sd


def build_table(records: Iterable[Mapping], spec: "ModelSpec") -> ObservationTable:
    """Build a balanced ObservationTable from row mappings.

    Each record needs ``level``, ``school_id`` (or ``school``), ``year``, the
    response column named by ``spec.response`` and every covariate listed in
    ``spec``. Schools are mapped to dense per-level indices in sorted order of
    their ids; levels and years likewise.

    Raises
    ------
    PanelError
        On an unbalanced panel, a response outside (0,1), duplicate keys or an
        unknown covariate name.
    """
    records = list(records)
    if not records:
        raise PanelError("no records")
    wanted = list(spec.mean_covariates) + [c for c in spec.precision_covariates if c not in spec.mean_covariates]
    school_key = SCHOOL_COLUMN if SCHOOL_COLUMN in records[0] else "school"
    for nm in wanted + [spec.response, LEVEL_COLUMN, YEAR_COLUMN, school_key]:
        if nm not in records[0]:
            raise PanelError(f"unknown covariate or column {nm!r}")

    lev_codes, lev_labels = _dense_codes([r[LEVEL_COLUMN] for r in records])
    yr_codes, yr_labels = _dense_codes([r[YEAR_COLUMN] for r in records])
    I, T = len(lev_labels), len(yr_labels)
    sch_codes = np.empty(len(records), dtype=np.int64)
    school_labels = []
    for i in range(I):
        rows = np.flatnonzero(lev_codes == i)
        codes, labels = _dense_codes([str(records[k][school_key]) for k in rows])
        sch_codes[rows] = codes
        school_labels.append(tuple(labels))

    seen = set()
    for k in range(len(records)):
        key = (lev_codes[k], sch_codes[k], yr_codes[k])
        if key in seen:
            raise PanelError(f"duplicate record for {PanelIndex(key[0] + 1, key[1] + 1, key[2] + 1)}")
        seen.add(key)
    missing = [
        PanelIndex(i + 1, j + 1, t + 1)
        for i in range(I)
        for j in range(len(school_labels[i]))
        for t in range(T)
        if (i, j, t) not in seen
    ]
    if missing:
        shown = ", ".join(
            f"(level={lev_labels[m.level - 1]}, school={school_labels[m.level - 1][m.school - 1]}, "
            f"year={yr_labels[m.year - 1]})"
            for m in missing[:10]
        )
        raise PanelError(f"unbalanced panel; missing {len(missing)} record(s): {shown}")

    order = np.lexsort((sch_codes, yr_codes, lev_codes))
    y = np.array([float(records[k][spec.response]) for k in order])
    cols = {}
    for nm in wanted:
        v = np.array([float(records[k][nm]) for k in order])
        if nm in spec.standardize:
            v = covariate_standardize(v)
        cols[nm] = v
    n = len(order)
    X = np.column_stack([np.ones(n)] + [cols[c] for c in spec.mean_covariates])
    Q = np.column_stack([np.ones(n)] + [cols[c] for c in spec.precision_covariates])
    bad = np.flatnonzero(~((y > 0) & (y < 1)))
    if bad.size:
        k = order[bad[0]]
        raise PanelError(
            f"response {y[bad[0]]!r} outside (0,1) at level={records[k][LEVEL_COLUMN]}, "
            f"school={records[k][school_key]}, year={records[k][YEAR_COLUMN]}"
        )
    return ObservationTable(
        y, X, Q, lev_codes[order], sch_codes[order], yr_codes[order], I, T,
        ("intercept",) + tuple(spec.mean_covariates),
        ("intercept",) + tuple(spec.precision_covariates),
        tuple(lev_labels), tuple(yr_labels), tuple(school_labels),
    )


def read_panel_csv(path, spec: "ModelSpec") -> ObservationTable:
    """Read a panel CSV (header row, one row per level/school/year)."""
    frame = pd.read_csv(path, dtype={SCHOOL_COLUMN: str}, encoding="utf-8", float_precision="round_trip")
    return build_table(frame.to_dict("records"), spec)
