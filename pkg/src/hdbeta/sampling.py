"""Stratified sample design: cum-sqrt(f) stratum boundaries, certainty
strata, seeded selection within strata and panel retention."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .rng import generator

__all__ = [
    "StrataDefinition",
    "assign_strata",
    "cum_sqrt_f_boundaries",
    "dalenius_hodges_boundaries",
    "describe_strata",
    "retain_panel",
    "stratification_objective",
    "stratified_sample",
]


@dataclass(frozen=True)
class StrataDefinition:
    boundaries: np.ndarray
    sizes: np.ndarray
    weights: np.ndarray
    within_variances: np.ndarray
    objective: float

    def to_dict(self) -> dict:
        return {
            "boundaries": self.boundaries.tolist(),
            "N_h": self.sizes.tolist(),
            "W_h": self.weights.tolist(),
            "S2_h": self.within_variances.tolist(),
            "objective": self.objective,
        }


def assign_strata(values, boundaries) -> np.ndarray:
    """Stratum index per value; a value equal to a boundary goes to the lower stratum."""
    return np.searchsorted(np.asarray(boundaries, dtype=float), np.asarray(values, dtype=float), side="left")


class _Objective:
    """sum_h W_h S_h^2 from prefix sums of the sorted, centred values."""

    def __init__(self, values):
        v = np.sort(np.asarray(values, dtype=float))
        self.sorted = v
        c = v - v.mean()
        self.s1 = np.concatenate([[0.0], np.cumsum(c)])
        self.s2 = np.concatenate([[0.0], np.cumsum(c * c)])
        self.n = v.size

    def __call__(self, boundaries) -> float:
        cuts = np.concatenate([[0], np.searchsorted(self.sorted, boundaries, side="right"), [self.n]])
        cnt = np.diff(cuts)
        s1 = np.diff(self.s1[cuts])
        s2 = np.diff(self.s2[cuts])
        nz = cnt > 0
        within = np.zeros_like(s2)
        within[nz] = s2[nz] - s1[nz] ** 2 / cnt[nz]
        return float(within.sum() / self.n)


def stratification_objective(values, boundaries) -> float:
    """Variance objective ``sum_h (N_h/N) S_h^2`` with population (ddof=0) variances."""
    return _Objective(values)(np.asarray(boundaries, dtype=float))


def _histogram(values, bins):
    v = np.asarray(values, dtype=float)
    counts, edges = np.histogram(v, bins=bins, range=(v.min(), v.max()))
    return counts, edges


def cum_sqrt_f_boundaries(values, num_strata: int, bins: int = 100) -> np.ndarray:
    """Boundaries from the cumulative square-root-of-frequency rule.

    Each boundary is the interior histogram edge whose cumulative sqrt(f)
    is closest to an equal share of the total.
    """
    return _cum_sqrt_f_indices(values, num_strata, bins)[1]


def _cum_sqrt_f_indices(values, num_strata, bins):
    counts, edges = _histogram(values, bins)
    csf = np.cumsum(np.sqrt(counts))  # csf[e-1] is the total below edge e
    interior = np.arange(1, bins)
    idx = []
    for k in range(1, num_strata):
        target = k * csf[-1] / num_strata
        e = int(interior[np.argmin(np.abs(csf[interior - 1] - target))])
        idx.append(e)
    idx = np.array(idx)
    # force strictly increasing edge indices
    for k in range(1, idx.size):
        idx[k] = max(idx[k], idx[k - 1] + 1)
    for k in range(idx.size - 1, -1, -1):
        idx[k] = min(idx[k], bins - (idx.size - k))
        if k + 1 < idx.size:
            idx[k] = min(idx[k], idx[k + 1] - 1)
    return idx, edges[idx], edges


def dalenius_hodges_boundaries(values, num_strata: int, bins: int = 100) -> np.ndarray:
    """Stratum boundaries minimizing ``sum_h W_h S_h^2``.

    Starts from the cum-sqrt(f) boundaries on a ``bins``-bin equal-width
    histogram and then runs coordinate descent over the histogram edges,
    moving one boundary one edge at a time while the objective drops.
    The returned boundaries are locally optimal on that edge grid.
    """
    v = np.asarray(values, dtype=float)
    if num_strata < 2:
        raise ValueError("num_strata must be >= 2")
    if np.unique(v).size < num_strata:
        raise ValueError(f"need at least {num_strata} distinct values for {num_strata} strata")
    if bins < num_strata:
        raise ValueError("bins must be >= num_strata")
    idx, start, edges = _cum_sqrt_f_indices(v, num_strata, bins)
    objective = _Objective(v)
    best = objective(edges[idx])
    start_value = best
    improved = True
    while improved:
        improved = False
        for k in range(idx.size):
            for step in (-1, 1):
                cand = idx[k] + step
                lo = idx[k - 1] + 1 if k > 0 else 1
                hi = idx[k + 1] - 1 if k + 1 < idx.size else bins - 1
                if cand < lo or cand > hi:
                    continue
                trial = idx.copy()
                trial[k] = cand
                val = objective(edges[trial])
                if val < best - 1e-15 * max(1.0, abs(best)):
                    idx, best, improved = trial, val, True
    if best > start_value:
        raise RuntimeError("refinement increased the stratification objective")
    return edges[idx].copy()


def describe_strata(values, boundaries) -> StrataDefinition:
    v = np.asarray(values, dtype=float)
    b = np.asarray(boundaries, dtype=float)
    lab = assign_strata(v, b)
    U = b.size + 1
    sizes = np.bincount(lab, minlength=U)
    var = np.array([v[lab == h].var() if sizes[h] else 0.0 for h in range(U)])
    return StrataDefinition(b, sizes, sizes / v.size, var, stratification_objective(v, b))


def stratified_sample(
    units: Sequence[Hashable],
    strata: Sequence[Hashable],
    certainty: Sequence[bool],
    fraction: float,
    seed: int,
) -> list:
    """Select certainty units plus ceil(fraction * N_h) units per other stratum.

    Selection within a stratum is simple random sampling without replacement
    from a generator derived from ``(seed, stratum label)``. The result keeps
    the population order.
    """
    units = list(units)
    if not units:
        raise ValueError("empty population")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if not len(units) == len(strata) == len(certainty):
        raise ValueError("units, strata and certainty must have equal length")
    keep = np.array([bool(c) for c in certainty])
    groups: dict = {}
    for k, lab in enumerate(strata):
        if not keep[k]:
            groups.setdefault(lab, []).append(k)
    for lab in sorted(groups, key=str):
        rows = np.array(groups[lab])
        take = min(rows.size, math.ceil(round(fraction * rows.size, 9)))
        rng = generator(seed, "stratum", lab)
        keep[rng.choice(rows, size=take, replace=False)] = True
    return [u for u, k in zip(units, keep) if k]


def retain_panel(selected: Iterable[Hashable], participation: Mapping[Hashable, Iterable], years: Iterable) -> list:
    """Keep units whose participation covers every requested year."""
    need = set(years)
    return [u for u in selected if need <= set(participation.get(u, ()))]
