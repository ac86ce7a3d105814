"""Hierarchical dynamic beta regression: specification, parameter state and
log densities.

Mean structure::

    logit(mu_ijt) = X_ijt' beta_it,  beta_it = alpha_t + v_it,  v_it ~ N(0, V_beta_i)
    alpha_t = alpha_{t-1} + w_t,     w_t ~ N(0, W_alpha)

Precision structure (note the minus sign)::

    log(phi_ijt) = -Q_ijt' delta_it, delta_it = gamma_t + v1_it, v1_it ~ N(0, V_delta_i)
    gamma_t = gamma_{t-1} + w1_t,    w1_t ~ N(0, W_gamma)

The variants M1..M5 restrict how ``delta`` varies. Tying is done by storage
shape: ``delta`` is held as an ``(I', T', q)`` array with ``I'`` in {1, I} and
``T'`` in {1, T}, and read through numpy broadcasting, so a shared value is
one slot and every (i, t) reader sees it.

=======  ===============  =======================================
variant  delta storage     prior on delta
=======  ===============  =======================================
M1       (1, 1, 1)        N(m0, C0)
M2       (1, 1, q)        N(m0, C0)
M3       (I, 1, q)        N(m0, C0) independently per level
M4       (1, T, q)        N(gamma_t, V_delta) with gamma random walk
M5       (I, T, q)        N(gamma_t, V_delta_i) with gamma random walk
=======  ===============  =======================================

Under M1-M3 the gamma walk is not identified; ``gamma`` is then a derived
quantity (the level average of delta) and carries no prior term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Mapping

import numpy as np
from scipy.special import digamma, expit, gammaln

from .data import ObservationTable

__all__ = [
    "FAMILIES",
    "VARIANTS",
    "ModelSpec",
    "ParameterState",
    "PriorSpec",
    "beta_logpdf",
    "beta_logpdf_grad",
    "beta_moments",
    "embed_state",
    "initial_state",
    "linear_predictors",
    "log_likelihood",
    "log_prior",
    "mean_link",
    "normal_logit_logpdf",
    "observation_loglik",
    "precision_link",
]

VARIANTS = ("M1", "M2", "M3", "M4", "M5")
FAMILIES = ("beta", "normal_logit")
VARIANCE_BLOCKS = ("V_beta", "W_alpha", "V_delta", "W_gamma")
SCHEMA_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


def _as_tuple(x) -> tuple:
    if x is None:
        return ()
    if isinstance(x, str):
        return (x,)
    return tuple(x)


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters.

    Every variance entry gets an inverse-gamma prior with shape
    ``variance_shape`` (in (1, 2], so the prior variance is infinite) and a
    rate chosen so that the prior mean equals ``variance_means[block]``.
    ``alpha_0`` and ``gamma_0`` are N(m0, C0) with C0 = ``initial_variance``.
    """

    variance_shape: float = 2.0
    variance_means: Mapping[str, object] = field(
        default_factory=lambda: {k: 0.1 for k in VARIANCE_BLOCKS}
    )
    initial_mean_alpha: object = 0.0
    initial_mean_gamma: object = 0.0
    initial_variance: float = 100.0

    def __post_init__(self):
        a = self.variance_shape
        if not 1.0 < a <= 2.0:
            raise ValueError("variance_shape must lie in (1, 2] (finite mean, infinite variance)")
        if not self.initial_variance > 0:
            raise ValueError("initial_variance (C0) must be positive")
        means = {k: 0.1 for k in VARIANCE_BLOCKS}
        for k, v in dict(self.variance_means).items():
            if k not in VARIANCE_BLOCKS:
                raise ValueError(f"unknown variance block {k!r}")
            if np.any(np.asarray(v, dtype=float) <= 0):
                raise ValueError(f"prior mean for {k} must be positive")
            means[k] = v
        object.__setattr__(self, "variance_means", means)

    def rate(self, block: str, shape) -> np.ndarray:
        mean = np.broadcast_to(np.asarray(self.variance_means[block], dtype=float), shape)
        return mean * (self.variance_shape - 1.0)

    def prior_mean(self, block: str, shape) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.variance_means[block], dtype=float), shape).copy()

    def m0_alpha(self, p: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.initial_mean_alpha, dtype=float), (p,)).copy()

    def m0_gamma(self, q: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.initial_mean_gamma, dtype=float), (q,)).copy()

    def to_dict(self) -> dict:
        def plain(v):
            return np.asarray(v, dtype=float).tolist()

        return {
            "variance_shape": self.variance_shape,
            "variance_means": {k: plain(v) for k, v in self.variance_means.items()},
            "initial_mean_alpha": plain(self.initial_mean_alpha),
            "initial_mean_gamma": plain(self.initial_mean_gamma),
            "initial_variance": self.initial_variance,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class ModelSpec:
    """Model choice plus the covariates that build X and Q.

    ``mean_covariates`` and ``precision_covariates`` exclude the intercept,
    which is always prepended. ``standardize`` lists continuous columns to
    z-score over the whole table at ingestion.
    """

    variant: str = "M5"
    family: str = "beta"
    mean_covariates: tuple = ()
    precision_covariates: tuple = ()
    standardize: tuple = ()
    response: str = "y"
    prior: PriorSpec = field(default_factory=PriorSpec)
    seed: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        for name in ("mean_covariates", "precision_covariates", "standardize"):
            object.__setattr__(self, name, _as_tuple(getattr(self, name)))
        if self.variant == "M1" and self.precision_covariates:
            raise ValueError("M1 has an intercept-only precision (q = 1)")
        if isinstance(self.prior, Mapping):
            object.__setattr__(self, "prior", PriorSpec.from_dict(self.prior))

    @property
    def p(self) -> int:
        return 1 + len(self.mean_covariates)

    @property
    def q(self) -> int:
        return 1 + len(self.precision_covariates)

    @property
    def delta_varies_by_level(self) -> bool:
        return self.variant in ("M3", "M5")

    @property
    def delta_varies_by_year(self) -> bool:
        return self.variant in ("M4", "M5")

    @property
    def has_gamma_walk(self) -> bool:
        return self.delta_varies_by_year

    def delta_shape(self, I: int, T: int) -> tuple[int, int, int]:
        return (I if self.delta_varies_by_level else 1, T if self.delta_varies_by_year else 1, self.q)

    def v_delta_shape(self, I: int) -> tuple[int, int]:
        if not self.has_gamma_walk:
            return (0, self.q)
        return (I if self.delta_varies_by_level else 1, self.q)

    def with_variant(self, variant: str, precision_covariates=None) -> "ModelSpec":
        prec = self.precision_covariates if precision_covariates is None else _as_tuple(precision_covariates)
        if variant == "M1":
            prec = ()
        return replace(self, variant=variant, precision_covariates=prec)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "variant": self.variant,
            "family": self.family,
            "mean_covariates": list(self.mean_covariates),
            "precision_covariates": list(self.precision_covariates),
            "standardize": list(self.standardize),
            "response": self.response,
            "prior": self.prior.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        d.pop("schema_version", None)
        prior = PriorSpec.from_dict(d.pop("prior", {}) or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model spec field(s): {sorted(unknown)}")
        return cls(prior=prior, **d)


# ---------------------------------------------------------------------------
# parameter state


@dataclass
class ParameterState:
    """One full draw of the parameters.

    Shapes: beta (I, T, p); alpha (T, p); alpha0 (p,); delta per
    :meth:`ModelSpec.delta_shape`; gamma (T, q); gamma0 (q,); V_beta (I, p);
    W_alpha (p,); V_delta per :meth:`ModelSpec.v_delta_shape`; W_gamma (q,)
    or (0,) when the variant has no gamma walk.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha0: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    gamma0: np.ndarray
    V_beta: np.ndarray
    W_alpha: np.ndarray
    V_delta: np.ndarray
    W_gamma: np.ndarray

    FIELDS = ("beta", "alpha", "alpha0", "delta", "gamma", "gamma0", "V_beta", "W_alpha", "V_delta", "W_gamma")

    @property
    def n_levels(self) -> int:
        return self.beta.shape[0]

    @property
    def n_years(self) -> int:
        return self.beta.shape[1]

    def delta_full(self) -> np.ndarray:
        """Read-only (I, T, q) view of the (possibly tied) delta."""
        I, T = self.beta.shape[:2]
        return np.broadcast_to(self.delta, (I, T, self.delta.shape[2]))

    def copy(self) -> "ParameterState":
        return ParameterState(*(getattr(self, f).copy() for f in self.FIELDS))

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, f).ravel() for f in self.FIELDS])

    def layout(self) -> list[tuple[str, tuple]]:
        return [(f, getattr(self, f).shape) for f in self.FIELDS]

    @classmethod
    def from_flat(cls, vec, layout) -> "ParameterState":
        vec = np.asarray(vec, dtype=float)
        parts, k = [], 0
        for _, shape in layout:
            size = int(np.prod(shape))
            parts.append(vec[k:k + size].reshape(shape).copy())
            k += size
        if k != vec.size:
            raise ValueError("flat vector length does not match layout")
        return cls(*parts)

    def names(self, spec: ModelSpec) -> list[str]:
        """Hierarchical column names, 1-based i and t, 0-based covariate m / k."""
        I, T, p = self.beta.shape
        q = self.gamma.shape[1]
        out = [f"beta[i={i + 1},t={t + 1},m={m}]" for i in range(I) for t in range(T) for m in range(p)]
        out += [f"alpha[t={t + 1},m={m}]" for t in range(T) for m in range(p)]
        out += [f"alpha0[m={m}]" for m in range(p)]
        di, dt, _ = self.delta.shape
        for i in range(di):
            for t in range(dt):
                for k in range(q):
                    idx = []
                    if spec.delta_varies_by_level:
                        idx.append(f"i={i + 1}")
                    if spec.delta_varies_by_year:
                        idx.append(f"t={t + 1}")
                    idx.append(f"k={k}")
                    out.append(f"delta[{','.join(idx)}]")
        out += [f"gamma[t={t + 1},k={k}]" for t in range(T) for k in range(q)]
        out += [f"gamma0[k={k}]" for k in range(q)]
        out += [f"V_beta[i={i + 1},m={m}]" for i in range(I) for m in range(p)]
        out += [f"W_alpha[m={m}]" for m in range(p)]
        for i in range(self.V_delta.shape[0]):
            for k in range(q):
                out.append(f"V_delta[i={i + 1},k={k}]" if spec.delta_varies_by_level else f"V_delta[k={k}]")
        out += [f"W_gamma[k={k}]" for k in range(self.W_gamma.shape[0])]
        return out


def is_variance_name(name: str) -> bool:
    return name.startswith(("V_", "W_"))


def sync_derived(state: ParameterState, spec: ModelSpec) -> None:
    """Set gamma to the level average of delta for variants without a gamma walk."""
    if spec.has_gamma_walk:
        return
    g = state.delta.mean(axis=(0, 1))
    state.gamma[:] = g
    state.gamma0[:] = g


def initial_state(n_levels: int, n_years: int, spec: ModelSpec) -> ParameterState:
    """Zero locations, variances at their prior means."""
    I, T, p, q = n_levels, n_years, spec.p, spec.q
    pr = spec.prior
    state = ParameterState(
        beta=np.zeros((I, T, p)),
        alpha=np.zeros((T, p)),
        alpha0=np.zeros(p),
        delta=np.zeros(spec.delta_shape(I, T)),
        gamma=np.zeros((T, q)),
        gamma0=np.zeros(q),
        V_beta=pr.prior_mean("V_beta", (I, p)),
        W_alpha=pr.prior_mean("W_alpha", (p,)),
        V_delta=pr.prior_mean("V_delta", spec.v_delta_shape(I)),
        W_gamma=pr.prior_mean("W_gamma", (q if spec.has_gamma_walk else 0,)),
    )
    return state


def check_state(state: ParameterState, spec: ModelSpec, n_levels: int | None = None, n_years: int | None = None) -> None:
    I, T, p = state.beta.shape
    if n_levels is not None and (I, T) != (n_levels, n_years):
        raise ValueError(f"state has {I} levels x {T} years, table has {n_levels} x {n_years}")
    expected = {
        "beta": (I, T, spec.p),
        "alpha": (T, spec.p),
        "alpha0": (spec.p,),
        "delta": spec.delta_shape(I, T),
        "gamma": (T, spec.q),
        "gamma0": (spec.q,),
        "V_beta": (I, spec.p),
        "W_alpha": (spec.p,),
        "V_delta": spec.v_delta_shape(I),
        "W_gamma": (spec.q if spec.has_gamma_walk else 0,),
    }
    for name, shape in expected.items():
        got = getattr(state, name).shape
        if got != shape:
            raise ValueError(f"{name} has shape {got}, expected {shape} for {spec.variant}")


def embed_state(state: ParameterState, source: ModelSpec, target: ModelSpec) -> ParameterState:
    """Re-express a state of a coarser variant in a finer one.

    Extra precision coefficients (e.g. M1 -> M2) are set to zero, so the
    linear predictor, and hence the likelihood, is unchanged. Variance
    blocks that only exist in the target start at their prior means.
    """
    I, T, _ = state.beta.shape
    full = np.array(state.delta_full())
    if target.q < full.shape[2]:
        raise ValueError("target variant has fewer precision coefficients than source")
    if target.q > full.shape[2]:
        full = np.concatenate([full, np.zeros((I, T, target.q - full.shape[2]))], axis=2)
    di, dt, _ = target.delta_shape(I, T)
    delta = full[:di, :dt].copy()
    if not np.allclose(np.broadcast_to(delta, full.shape), full, rtol=0, atol=0):
        raise ValueError(f"{source.variant} state does not embed into {target.variant}")
    out = initial_state(I, T, target)
    out.beta[:] = state.beta
    out.alpha[:] = state.alpha
    out.alpha0[:] = state.alpha0
    out.V_beta[:] = state.V_beta
    out.W_alpha[:] = state.W_alpha
    out.delta = delta
    if target.has_gamma_walk:
        out.gamma[:] = delta.mean(axis=0)
        out.gamma0[:] = out.gamma[0]
    sync_derived(out, target)
    return out


# ---------------------------------------------------------------------------
# links and densities


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


_MU_LO = np.finfo(float).tiny
_MU_HI = np.nextafter(1.0, 0.0)


def mean_link(x, beta):
    """Inverse logit of ``x . beta`` (last axis).

    Saturated values are clamped to the nearest doubles inside (0, 1).
    """
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    _finite(x, beta)
    return np.clip(expit(np.sum(x * beta, axis=-1)), _MU_LO, _MU_HI)


def precision_link(qvec, delta):
    """``exp(-qvec . delta)``."""
    qvec = np.asarray(qvec, dtype=float)
    delta = np.asarray(delta, dtype=float)
    _finite(qvec, delta)
    return np.exp(-np.sum(qvec * delta, axis=-1))


def _check_beta_domain(y, mu, phi):
    if np.any(~((y > 0) & (y < 1))):
        raise ValueError("y must lie in (0, 1)")
    if np.any(~((mu > 0) & (mu < 1))):
        raise ValueError("mu must lie in (0, 1)")
    if np.any(~(phi > 0)) or np.any(~np.isfinite(phi)):
        raise ValueError("phi must be positive and finite")


def beta_logpdf(y, mu, phi):
    """Log density of the mean/precision beta, Beta(mu phi, (1 - mu) phi)."""
    y, mu, phi = (np.asarray(v, dtype=float) for v in (y, mu, phi))
    _check_beta_domain(y, mu, phi)
    a = mu * phi
    b = (1.0 - mu) * phi
    return gammaln(phi) - gammaln(a) - gammaln(b) + (a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y)


def beta_logpdf_grad(y, mu, phi):
    """Partial derivatives of :func:`beta_logpdf` with respect to mu and phi."""
    y, mu, phi = (np.asarray(v, dtype=float) for v in (y, mu, phi))
    _check_beta_domain(y, mu, phi)
    a = mu * phi
    b = (1.0 - mu) * phi
    ly, l1y = np.log(y), np.log1p(-y)
    d_mu = phi * (digamma(b) - digamma(a) + ly - l1y)
    d_phi = digamma(phi) - mu * digamma(a) - (1.0 - mu) * digamma(b) + mu * ly + (1.0 - mu) * l1y
    return d_mu, d_phi


def beta_moments(mu, phi):
    mu, phi = np.asarray(mu, dtype=float), np.asarray(phi, dtype=float)
    if np.any(~((mu > 0) & (mu < 1))) or np.any(~(phi > 0)):
        raise ValueError("need mu in (0,1) and phi > 0")
    return mu, mu * (1.0 - mu) / (1.0 + phi)


def normal_logit_logpdf(y, eta, phi, jacobian: bool = False):
    """Gaussian log density of logit(y) with mean eta and precision phi.

    With ``jacobian=True`` the density is expressed on the y scale by adding
    ``-log(y (1 - y))``.
    """
    y, eta, phi = (np.asarray(v, dtype=float) for v in (y, eta, phi))
    ystar = np.log(y) - np.log1p(-y)
    out = 0.5 * (np.log(phi) - _LOG_2PI) - 0.5 * phi * (ystar - eta) ** 2
    if jacobian:
        out = out - np.log(y) - np.log1p(-y)
    return out


def linear_predictors(table: ObservationTable, state: ParameterState) -> tuple[np.ndarray, np.ndarray]:
    """Per-observation ``eta = X'beta_it`` and ``zeta = Q'delta_it`` (log phi = -zeta)."""
    b = state.beta[table.level, table.year]
    d = state.delta_full()[table.level, table.year]
    return np.einsum("np,np->n", table.X, b), np.einsum("nq,nq->n", table.Q, d)


def _beta_ll(logy, log1my, eta, zeta):
    phi = np.exp(-zeta)
    a = expit(eta) * phi
    b = expit(-eta) * phi
    return gammaln(phi) - gammaln(a) - gammaln(b) + (a - 1.0) * logy + (b - 1.0) * log1my


def _normal_ll(ystar, eta, zeta):
    return -0.5 * (zeta + _LOG_2PI) - 0.5 * np.exp(-zeta) * (ystar - eta) ** 2


def observation_loglik(table: ObservationTable, state: ParameterState, spec: ModelSpec, scale: str = "model") -> np.ndarray:
    """Per-observation log density.

    ``scale="model"`` is the family's own scale (y for beta, logit(y) for the
    normal baseline); ``scale="y"`` adds the logit Jacobian for the normal
    baseline and is identical to ``"model"`` for the beta family.
    """
    check_state(state, spec, table.n_levels, table.n_years)
    if (table.p, table.q) != (spec.p, spec.q):
        raise ValueError(f"table has p={table.p}, q={table.q}; spec expects p={spec.p}, q={spec.q}")
    eta, zeta = linear_predictors(table, state)
    logy, log1my = np.log(table.y), np.log1p(-table.y)
    if spec.family == "beta":
        return _beta_ll(logy, log1my, eta, zeta)
    ll = _normal_ll(logy - log1my, eta, zeta)
    if scale == "y":
        ll = ll - logy - log1my
    elif scale != "model":
        raise ValueError(f"unknown scale {scale!r}")
    return ll


def log_likelihood(table: ObservationTable, state: ParameterState, spec: ModelSpec, scale: str = "model") -> float:
    """Sum of per-observation log densities (numpy pairwise summation)."""
    return float(np.sum(observation_loglik(table, state, spec, scale)))


def _norm_logpdf(x, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def _invgamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) - (shape + 1.0) * np.log(x) - rate / x


def log_prior(state: ParameterState, spec: ModelSpec) -> float:
    """Log prior density of the full state (tied delta blocks counted once)."""
    check_state(state, spec)
    pr = spec.prior
    a = pr.variance_shape
    C0 = pr.initial_variance
    for name in VARIANCE_BLOCKS:
        v = getattr(state, name)
        if np.any(~(v > 0)):
            raise ValueError(f"non-positive variance in {name}")
    I = state.n_levels
    p, q = spec.p, spec.q
    terms = [
        _norm_logpdf(state.beta, state.alpha[None], state.V_beta[:, None, :]),
        _norm_logpdf(state.alpha, np.vstack([state.alpha0, state.alpha[:-1]]), state.W_alpha),
        _norm_logpdf(state.alpha0, pr.m0_alpha(p), C0),
        _invgamma_logpdf(state.V_beta, a, pr.rate("V_beta", (I, p))),
        _invgamma_logpdf(state.W_alpha, a, pr.rate("W_alpha", (p,))),
    ]
    if spec.has_gamma_walk:
        terms += [
            _norm_logpdf(state.delta, state.gamma[None], state.V_delta[:, None, :]),
            _norm_logpdf(state.gamma, np.vstack([state.gamma0, state.gamma[:-1]]), state.W_gamma),
            _norm_logpdf(state.gamma0, pr.m0_gamma(q), C0),
            _invgamma_logpdf(state.V_delta, a, pr.rate("V_delta", state.V_delta.shape)),
            _invgamma_logpdf(state.W_gamma, a, pr.rate("W_gamma", (q,))),
        ]
    else:
        terms.append(_norm_logpdf(state.delta, pr.m0_gamma(q), C0))
    return float(sum(np.sum(t) for t in terms))
