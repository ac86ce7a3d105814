"""Map raw bounded school scores onto the open unit interval.

Within each (level, year) group the scores are z-scored and the group's
theoretical floor (score 0) and ceiling (``s_max``) are pushed through the
same affine map; the response is the position of the z-score between those
two images. Algebraically this equals ``W / s_max``, but the pipeline is kept
step by step so the per-group statistics can be reported.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RawScoreTable

__all__ = ["GroupStatistics", "StandardizationSummary", "boundary_nudge", "standardize_scores"]


@dataclass(frozen=True)
class GroupStatistics:
    level: int
    year: int
    n: int
    mean: float
    sd: float
    lo: float
    hi: float

    def to_dict(self) -> dict:
        return {
            "level": self.level, "year": self.year, "n": self.n,
            "mean": self.mean, "sd": self.sd, "min": self.lo, "max": self.hi,
        }


@dataclass(frozen=True)
class StandardizationSummary:
    s_max: float
    groups: tuple[GroupStatistics, ...]

    def to_dict(self) -> dict:
        return {"s_max": self.s_max, "groups": [g.to_dict() for g in self.groups]}


def boundary_nudge(y, group_size):
    """Shrink values toward 1/2: ``(y (n - 1) + 0.5) / n``.

    ``group_size`` may be a scalar or one size per value.
    :func:`standardize_scores` applies it only to (level, year) groups that
    contain a value sitting exactly on 0 or 1.
    """
    n = np.asarray(group_size, dtype=float)
    if np.any(n < 1):
        raise ValueError("group_size must be >= 1")
    return (np.asarray(y, dtype=float) * (n - 1) + 0.5) / n


def standardize_scores(raw: RawScoreTable) -> tuple[np.ndarray, StandardizationSummary]:
    """Standardize raw scores per (level, year) group.

    Returns the (0,1) responses aligned with ``raw.scores`` and the per-group
    summary (sample mean, sample sd, and the images of 0 and ``s_max``).
    """
    w = raw.scores
    if w.size == 0:
        return w.copy(), StandardizationSummary(float(raw.s_max), ())
    # one int64 key per (level, year) pair; sorting it orders by level then year
    levels, li = np.unique(raw.level, return_inverse=True)
    years, yi = np.unique(raw.year, return_inverse=True)
    codes, g = np.unique(li.ravel() * years.size + yi.ravel(), return_inverse=True)
    g = g.ravel()
    keys = np.column_stack([levels[codes // years.size], years[codes % years.size]])
    n = np.bincount(g)
    small = np.flatnonzero(n < 2)
    if small.size:
        lev, yr = keys[small[0]]
        raise ValueError(f"group level={lev}, year={yr} has fewer than 2 schools")
    mean = np.bincount(g, weights=w) / n
    sd = np.sqrt(np.bincount(g, weights=(w - mean[g]) ** 2) / (n - 1))
    flat = np.flatnonzero(~(sd > 0))
    if flat.size:
        lev, yr = keys[flat[0]]
        raise ValueError(f"zero score variance in group level={lev}, year={yr}")
    z = (w - mean[g]) / sd[g]
    lo = (0.0 - mean) / sd
    hi = (raw.s_max - mean) / sd
    y = (z - lo[g]) / (hi - lo)[g]
    y[w <= 0.0] = 0.0
    y[w >= raw.s_max] = 1.0
    # nudging the whole group keeps the map strictly monotone
    hit = np.bincount(g, weights=((y <= 0.0) | (y >= 1.0)).astype(float), minlength=n.size) > 0
    rows = hit[g]
    y[rows] = boundary_nudge(np.clip(y[rows], 0.0, 1.0), n[g][rows])
    groups = tuple(
        GroupStatistics(*row)
        for row in zip(keys[:, 0].tolist(), keys[:, 1].tolist(), n.tolist(), mean.tolist(), sd.tolist(), lo.tolist(), hi.tolist())
    )
    return y, StandardizationSummary(float(raw.s_max), groups)
