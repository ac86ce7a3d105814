"""Model comparison: DIC, ranked probability score, logarithmic score and
posterior predictive summaries.

All scores are in-sample (the fitting data are also scored). For the normal
baseline on logit(y) every score is available on the logit scale and on the
y scale (density multiplied by the logit Jacobian, replicates mapped back
through the inverse logit); reports carry the scale label.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import expit, logsumexp

from .data import ObservationTable
from .mcmc import ChainOutput
from .model import ModelSpec, ParameterState, is_variance_name, linear_predictors, observation_loglik
from .rng import generator

__all__ = [
    "PredictiveSummary",
    "ReplicateStore",
    "ScoreReport",
    "comparison_table",
    "dic",
    "dic_from_deviances",
    "format_comparison",
    "log_predictive_density",
    "logs",
    "posterior_mean_state",
    "predictive_summary",
    "replicate",
    "rps",
    "rps_per_observation",
    "rps_standard_error",
    "score_model",
]


def _as_list(outputs) -> list[ChainOutput]:
    return list(outputs) if isinstance(outputs, (list, tuple)) else [outputs]


def _pooled(outputs) -> np.ndarray:
    return np.vstack([o.samples for o in _as_list(outputs)])


def _jacobian_total(table: ObservationTable) -> float:
    return float(np.sum(-np.log(table.y) - np.log1p(-table.y)))


@dataclass(frozen=True)
class ScoreReport:
    """DIC components and scoring rules for one fitted model.

    ``p_d`` and ``dic`` are derived from ``d_bar`` and ``d_at_mean`` on
    access so the identity ``p_d = d_bar - d_at_mean`` always holds.
    """

    model_label: str
    d_bar: float
    d_at_mean: float
    rps: float
    logs: float
    scale: str = "y"

    @property
    def p_d(self) -> float:
        return self.d_bar - self.d_at_mean

    @property
    def dic(self) -> float:
        return self.d_bar + self.p_d

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(p_d=self.p_d, dic=self.dic)
        return d


def posterior_mean_state(outputs) -> ParameterState:
    """Posterior mean of the state: arithmetic for locations, geometric for variances."""
    outs = _as_list(outputs)
    x = _pooled(outs)
    names = outs[0].names
    mean = x.mean(axis=0)
    var_cols = np.array([is_variance_name(n) for n in names], dtype=bool)
    if var_cols.any():
        mean[var_cols] = np.exp(np.log(x[:, var_cols]).mean(axis=0))
    return ParameterState.from_flat(mean, outs[0].layout)


def dic_from_deviances(deviances, d_at_mean: float) -> tuple[float, float, float]:
    d_bar = float(np.mean(deviances))
    p_d = d_bar - d_at_mean
    return d_bar, p_d, d_bar + p_d


def _dic_parts(outputs, table, spec, scale) -> tuple[float, float]:
    outs = _as_list(outputs)
    dev = np.concatenate([o.deviances for o in outs])
    theta_bar = posterior_mean_state(outs)
    d_at_mean = -2.0 * float(np.sum(observation_loglik(table, theta_bar, spec)))
    if spec.family == "normal_logit" and scale == "y":
        shift = -2.0 * _jacobian_total(table)
        dev = dev + shift
        d_at_mean += shift
    return float(np.mean(dev)), d_at_mean


def dic(outputs, table: ObservationTable, spec: ModelSpec, scale: str = "model") -> tuple[float, float, float]:
    """Return ``(d_bar, p_d, dic)`` pooled over chains."""
    d_bar, d_at_mean = _dic_parts(outputs, table, spec, scale)
    return dic_from_deviances([d_bar], d_at_mean)


# ---------------------------------------------------------------------------
# replicates


@dataclass(frozen=True)
class ReplicateStore:
    """Two independent streams of posterior predictive replicates.

    ``primary`` and ``secondary`` are (M, n) on the y scale, M = L x reps.
    For the normal baseline ``latent_primary`` / ``latent_secondary`` hold
    the logit-scale draws the y-scale values were mapped from.
    """

    primary: np.ndarray
    secondary: np.ndarray
    latent_primary: np.ndarray | None = None
    latent_secondary: np.ndarray | None = None

    def streams(self, scale: str = "y"):
        if scale == "y":
            return self.primary, self.secondary
        if scale == "logit":
            if self.latent_primary is None:
                return _logit(self.primary), _logit(self.secondary)
            return self.latent_primary, self.latent_secondary
        raise ValueError(f"unknown scale {scale!r}")

    def pooled(self, scale: str = "y") -> np.ndarray:
        a, b = self.streams(scale)
        return np.vstack([a, b])


def _logit(y):
    y = np.asarray(y, dtype=float)
    return np.log(y) - np.log1p(-y)


def _draw_predictors(outputs, table):
    outs = _as_list(outputs)
    etas, zetas = [], []
    for o in outs:
        for l in range(len(o)):
            eta, zeta = linear_predictors(table, o.state(l))
            etas.append(eta)
            zetas.append(zeta)
    return np.array(etas), np.array(zetas)


def replicate(outputs, table: ObservationTable, spec: ModelSpec, reps_per_draw: int = 1, seed: int = 0) -> ReplicateStore:
    """Posterior predictive replicates, ``reps_per_draw`` per stored draw and stream.

    Observation k uses its own generator derived from ``(seed, k)``, so
    results do not depend on evaluation order.
    """
    if reps_per_draw < 1:
        raise ValueError("reps_per_draw must be >= 1")
    eta, zeta = _draw_predictors(outputs, table)
    if eta.shape[0] < 1:
        raise ValueError("need at least one stored draw")
    L, n = eta.shape
    R = reps_per_draw
    prim = np.empty((L * R, n))
    sec = np.empty((L * R, n))
    lat_p = lat_s = None
    phi = np.exp(-zeta)
    if spec.family == "beta":
        a = expit(eta) * phi
        b = expit(-eta) * phi
        for k in range(n):
            rng = generator(seed, "replicate", k)
            prim[:, k] = rng.beta(a[:, k], b[:, k], size=(R, L)).ravel()
            sec[:, k] = rng.beta(a[:, k], b[:, k], size=(R, L)).ravel()
    else:
        lat_p = np.empty((L * R, n))
        lat_s = np.empty((L * R, n))
        sd = 1.0 / np.sqrt(phi)
        for k in range(n):
            rng = generator(seed, "replicate", k)
            lat_p[:, k] = (eta[:, k] + sd[:, k] * rng.standard_normal((R, L))).ravel()
            lat_s[:, k] = (eta[:, k] + sd[:, k] * rng.standard_normal((R, L))).ravel()
        prim, sec = expit(lat_p), expit(lat_s)
    return ReplicateStore(prim, sec, lat_p, lat_s)


def _streams(replicates, scale="y"):
    if isinstance(replicates, ReplicateStore):
        a, b = replicates.streams(scale)
    elif isinstance(replicates, tuple) and len(replicates) == 2:
        a, b = (np.asarray(r, dtype=float) for r in replicates)
    else:
        r = np.asarray(replicates, dtype=float)
        if r.ndim == 1:
            r = r[:, None]
        half = r.shape[0] // 2
        a, b = r[:half], r[half:2 * half]
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[0] < 1 or a.shape[0] + b.shape[0] < 2 or a.shape != b.shape:
        raise ValueError("need at least 2 replicates per observation in two equal streams")
    return a, b


def rps_per_observation(replicates, observed, scale: str = "y") -> np.ndarray:
    """Monte Carlo RPS per observation: mean|Y - y| - mean|Y - Y'| / 2.

    ``replicates`` is a :class:`ReplicateStore`, a ``(primary, secondary)``
    pair of (M, n) arrays, or a single (2M, n) array whose halves are used
    as the two streams.
    """
    a, b = _streams(replicates, scale)
    y = np.asarray(observed, dtype=float)
    if scale == "logit" and isinstance(replicates, ReplicateStore):
        y = _logit(y)
    return np.mean(np.abs(a - y), axis=0) - 0.5 * np.mean(np.abs(a - b), axis=0)


def rps(replicates, observed, scale: str = "y") -> float:
    """Average RPS over all observations."""
    return float(np.mean(rps_per_observation(replicates, observed, scale)))


def rps_standard_error(replicates, observed, scale: str = "y") -> float:
    """Monte Carlo standard error of :func:`rps` (pairs treated as independent)."""
    a, b = _streams(replicates, scale)
    y = np.asarray(observed, dtype=float)
    terms = np.abs(a - y) - 0.5 * np.abs(a - b)
    M, n = terms.shape
    return float(np.sqrt(np.sum(terms.var(axis=0, ddof=1) / M)) / n)


# ---------------------------------------------------------------------------
# logarithmic score


def log_predictive_density(outputs, table: ObservationTable, spec: ModelSpec, scale: str = "y") -> np.ndarray:
    """log of (1/L) sum_l p(y_k | theta_l) per observation, via log-sum-exp."""
    outs = _as_list(outputs)
    model_scale = "y" if scale == "y" else "model"
    if spec.family == "beta" and scale == "logit":
        raise ValueError("the beta family is scored on the y scale only")
    rows = [observation_loglik(table, o.state(l), spec, model_scale) for o in outs for l in range(len(o))]
    if not rows:
        raise ValueError("need at least one stored draw")
    ld = np.array(rows)
    return logsumexp(ld, axis=0) - np.log(ld.shape[0])


def logs(outputs, table: ObservationTable, spec: ModelSpec, scale: str = "y") -> float:
    """Mean of -log p(y) over observations."""
    return float(np.mean(-log_predictive_density(outputs, table, spec, scale)))


# ---------------------------------------------------------------------------
# predictive summaries


@dataclass(frozen=True)
class PredictiveSummary:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    observed: np.ndarray

    @property
    def outside(self) -> np.ndarray:
        return (self.observed < self.lower) | (self.observed > self.upper)

    def to_frame(self, table: ObservationTable | None = None) -> pd.DataFrame:
        out = pd.DataFrame({
            "observed": self.observed,
            "pred_mean": self.mean,
            "pred_q025": self.lower,
            "pred_q975": self.upper,
            "outside_95": self.outside,
        })
        if table is not None:
            keys = table.to_frame()[["level", "school_id", "year"]]
            out = pd.concat([keys.reset_index(drop=True), out], axis=1)
        return out


def predictive_summary(replicates, observed, level: float = 0.95) -> PredictiveSummary:
    """Mean and central ``level`` interval of the replicates per observation."""
    r = replicates.pooled() if isinstance(replicates, ReplicateStore) else np.asarray(replicates, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    if r.shape[0] < 40:
        raise ValueError("need at least 40 replicates per observation")
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(r, [tail, 1.0 - tail], axis=0)
    return PredictiveSummary(r.mean(axis=0), lo, hi, np.asarray(observed, dtype=float))


# ---------------------------------------------------------------------------
# reports


def score_model(outputs, table: ObservationTable, spec: ModelSpec, label: str | None = None,
                reps_per_draw: int = 1, seed: int = 0) -> list[ScoreReport]:
    """Score reports: one for the beta family, logit- and y-scale for the normal baseline."""
    label = label or spec.variant
    store = replicate(outputs, table, spec, reps_per_draw, seed)
    scales = ["y"] if spec.family == "beta" else ["logit", "y"]
    reports = []
    for sc in scales:
        d_bar, d_at_mean = _dic_parts(outputs, table, spec, "model" if sc == "logit" else "y")
        reports.append(ScoreReport(
            model_label=label if spec.family == "beta" else f"{label} [{sc}]",
            d_bar=d_bar,
            d_at_mean=d_at_mean,
            rps=rps(store, table.y, sc),
            logs=logs(outputs, table, spec, sc),
            scale=sc,
        ))
    return reports


COLUMNS = ("Model", "D_bar", "p_D", "DIC", "RPS", "LogS")


def comparison_table(reports: Sequence[ScoreReport]) -> pd.DataFrame:
    """Rows per model with D_bar, p_D, DIC, RPS, LogS and best-per-criterion flags.

    Only y-scale rows compete for the best flags; logit-scale rows of the
    normal baseline are on a different density scale.
    """
    df = pd.DataFrame({
        "Model": [r.model_label for r in reports],
        "scale": [r.scale for r in reports],
        "D_bar": [r.d_bar for r in reports],
        "p_D": [r.p_d for r in reports],
        "DIC": [r.dic for r in reports],
        "RPS": [r.rps for r in reports],
        "LogS": [r.logs for r in reports],
    })
    comparable = df["scale"] == "y"
    for col in ("DIC", "RPS", "LogS"):
        df[f"best_{col}"] = comparable & (df[col] == df.loc[comparable, col].min())
    return df


def format_comparison(df: pd.DataFrame) -> str:
    """Aligned text table; best value per criterion marked with ``*``."""
    fmt = {"D_bar": "{:.2f}", "p_D": "{:.2f}", "DIC": "{:.2f}", "RPS": "{:.5f}", "LogS": "{:.2f}"}
    cells = [list(COLUMNS)]
    for _, row in df.iterrows():
        line = [str(row["Model"])]
        for col in COLUMNS[1:]:
            s = fmt[col].format(row[col])
            if row.get(f"best_{col}", False):
                s += "*"
            line.append(s)
        cells.append(line)
    widths = [max(len(r[c]) for r in cells) for c in range(len(COLUMNS))]
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(v.ljust(widths[c]) if c == 0 else v.rjust(widths[c]) for c, v in enumerate(r)))
        if k == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines)
