"""Synthetic panels drawn from the generative model, with the ground truth."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .data import ObservationTable, covariate_standardize
from .model import ModelSpec, ParameterState, sync_derived
from .rng import generator

__all__ = ["CovariateGenerator", "SimulationScenario", "default_mean_covariates", "simulate_panel"]


@dataclass(frozen=True)
class CovariateGenerator:
    """How one covariate column is drawn.

    kind: ``"binary"`` (Bernoulli(prob)), ``"normal"`` (standard normal),
    ``"lognormal_count"`` (log-normal counts, z-scored over the table) or
    ``"constant"`` (``value``). School-level covariates are drawn once per
    school unless ``time_varying``.
    """

    name: str
    kind: str = "normal"
    prob: float = 0.5
    value: float = 1.0
    time_varying: bool = False

    def __post_init__(self):
        if self.kind not in ("binary", "normal", "lognormal_count", "constant"):
            raise ValueError(f"unknown covariate kind {self.kind!r}")


def default_mean_covariates() -> tuple[CovariateGenerator, ...]:
    return (
        CovariateGenerator("adm", "binary", prob=0.1),
        CovariateGenerator("hdi", "normal"),
        CovariateGenerator("lib", "binary", prob=0.7),
        CovariateGenerator("lab", "binary", prob=0.7),
        CovariateGenerator("boys", "normal", time_varying=True),
    )


def _default_precision():
    return (CovariateGenerator("nstudent", "lognormal_count", time_varying=True),)


@dataclass(frozen=True)
class SimulationScenario:
    n_levels: int = 3
    n_years: int = 8
    schools_per_level: object = 50
    mean_covariates: Sequence[CovariateGenerator] = field(default_factory=default_mean_covariates)
    precision_covariates: Sequence[CovariateGenerator] = field(default_factory=_default_precision)
    variant: str = "M5"
    V_beta: object = 0.05
    W_alpha: object = 0.02
    V_delta: object = 0.05
    W_gamma: object = 0.02
    alpha0: object = 0.0
    gamma0: object = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_levels < 1 or self.n_years < 1:
            raise ValueError("dimensions must be positive")
        if np.any(np.asarray(self.schools_per_level) < 1):
            raise ValueError("schools_per_level must be positive")
        for name in ("V_beta", "W_alpha", "V_delta", "W_gamma"):
            if np.any(np.asarray(getattr(self, name), dtype=float) < 0):
                raise ValueError(f"{name} must be non-negative")
        covs = [c if isinstance(c, CovariateGenerator) else CovariateGenerator(**c) for c in self.mean_covariates]
        prec = [c if isinstance(c, CovariateGenerator) else CovariateGenerator(**c) for c in self.precision_covariates]
        if self.variant == "M1":
            prec = []
        object.__setattr__(self, "mean_covariates", tuple(covs))
        object.__setattr__(self, "precision_covariates", tuple(prec))

    @property
    def p(self) -> int:
        return 1 + len(self.mean_covariates)

    @property
    def q(self) -> int:
        return 1 + len(self.precision_covariates)

    def model_spec(self, **kw) -> ModelSpec:
        """Matching ModelSpec (covariates already standardized in the table)."""
        variant = kw.pop("variant", self.variant)
        prec = () if variant == "M1" else tuple(c.name for c in self.precision_covariates)
        return ModelSpec(
            variant=variant,
            mean_covariates=tuple(c.name for c in self.mean_covariates),
            precision_covariates=prec,
            **kw,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("V_beta", "W_alpha", "V_delta", "W_gamma", "alpha0", "gamma0", "schools_per_level"):
            d[k] = np.asarray(d[k]).tolist()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimulationScenario":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in dict(d).items() if k != "schema_version"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario field(s): {sorted(unknown)}")
        return cls(**d)


def _draw_covariates(gens, level, school, year, rng):
    n = level.size
    cols = []
    for g in gens:
        if g.kind == "constant":
            cols.append(np.full(n, float(g.value)))
            continue
        if g.time_varying:
            keys = np.arange(n)
        else:
            _, keys = np.unique(np.stack([level, school]), axis=1, return_inverse=True)
            keys = keys.ravel()
        m = keys.max() + 1
        if g.kind == "binary":
            v = (rng.random(m) < g.prob).astype(float)
        elif g.kind == "normal":
            v = rng.standard_normal(m)
        else:
            v = np.round(np.exp(1.5 + 0.8 * rng.standard_normal(m))) + 1.0
        v = v[keys]
        if g.kind == "lognormal_count":
            v = covariate_standardize(v)
        cols.append(v)
    return cols


def simulate_panel(scenario: SimulationScenario) -> tuple[ObservationTable, ParameterState]:
    """Draw a balanced panel and the parameter state that generated it."""
    sc = scenario
    rng = generator(sc.seed, "simulate")
    I, T, p, q = sc.n_levels, sc.n_years, sc.p, sc.q
    spec = sc.model_spec()
    n_i = np.broadcast_to(np.asarray(sc.schools_per_level, dtype=int), (I,))

    def arr(v, shape):
        return np.broadcast_to(np.asarray(v, dtype=float), shape).copy()

    V_beta, W_alpha = arr(sc.V_beta, (I, p)), arr(sc.W_alpha, (p,))
    alpha0 = arr(sc.alpha0, (p,))
    alpha = alpha0 + np.cumsum(np.sqrt(W_alpha) * rng.standard_normal((T, p)), axis=0)
    beta = alpha[None] + np.sqrt(V_beta)[:, None, :] * rng.standard_normal((I, T, p))

    gamma0 = arr(sc.gamma0, (q,))
    di, dt, _ = spec.delta_shape(I, T)
    V_delta_draw = arr(sc.V_delta, (I, q))[:di]
    W_gamma = arr(sc.W_gamma, (q,))
    if spec.has_gamma_walk:
        gamma = gamma0 + np.cumsum(np.sqrt(W_gamma) * rng.standard_normal((T, q)), axis=0)
        delta = gamma[None, :dt] + np.sqrt(V_delta_draw)[:, None, :] * rng.standard_normal((di, dt, q))
    else:
        gamma = np.broadcast_to(gamma0, (T, q)).copy()
        noise = np.sqrt(V_delta_draw)[:, None, :] * rng.standard_normal((di, 1, q)) if spec.variant == "M3" else 0.0
        delta = np.broadcast_to(gamma0, (di, dt, q)) + noise
    truth = ParameterState(
        beta=beta,
        alpha=alpha,
        alpha0=alpha0,
        delta=np.array(delta, dtype=float),
        gamma=gamma,
        gamma0=gamma0,
        V_beta=V_beta,
        W_alpha=W_alpha,
        V_delta=V_delta_draw if spec.has_gamma_walk else np.zeros(spec.v_delta_shape(I)),
        W_gamma=W_gamma if spec.has_gamma_walk else np.zeros(0),
    )
    sync_derived(truth, spec)

    level = np.concatenate([np.full(n_i[i] * T, i) for i in range(I)])
    year = np.concatenate([np.repeat(np.arange(T), n_i[i]) for i in range(I)])
    school = np.concatenate([np.tile(np.arange(n_i[i]), T) for i in range(I)])
    X = np.column_stack([np.ones(level.size)] + _draw_covariates(sc.mean_covariates, level, school, year, rng))
    Q = np.column_stack([np.ones(level.size)] + _draw_covariates(sc.precision_covariates, level, school, year, rng))

    eta = np.einsum("np,np->n", X, beta[level, year])
    zeta = np.einsum("nq,nq->n", Q, truth.delta_full()[level, year])
    mu, phi = expit(eta), np.exp(-zeta)
    y = rng.beta(mu * phi, (1.0 - mu) * phi)
    tiny = np.finfo(float).eps
    y = np.clip(y, tiny, 1.0 - tiny)

    table = ObservationTable(
        y, X, Q, level, school, year, I, T,
        ("intercept",) + tuple(c.name for c in sc.mean_covariates),
        ("intercept",) + tuple(c.name for c in sc.precision_covariates),
        tuple(range(1, I + 1)),
        tuple(range(1, T + 1)),
        tuple(tuple(f"L{i + 1}S{j + 1:04d}" for j in range(n_i[i])) for i in range(I)),
    )
    return table, truth
