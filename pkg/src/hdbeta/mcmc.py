"""Metropolis-within-Gibbs sampler for the hierarchical dynamic beta model.

One sweep:

1. random-walk Metropolis on every beta_it block (dimension p),
2. single-site Gibbs for alpha_1..alpha_T, then the alpha_0 node,
3. random-walk Metropolis on every delta unit (granularity per variant),
4. Gibbs for gamma_1..gamma_T and gamma_0 (M4, M5 only),
5. conjugate inverse-gamma Gibbs for all variance entries.

Blocks of step 1 are conditionally independent given alpha and the variances
(they touch disjoint observations), and the same holds for the delta units of
step 3, so each step proposes all blocks at once and accepts or rejects them
independently. This is the same transition kernel as visiting the blocks one
after another.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from scipy.special import digamma, expit

from .data import ObservationTable
from .model import (
    ModelSpec,
    ParameterState,
    _beta_ll,
    _normal_ll,
    check_state,
    initial_state,
    log_prior,
    sync_derived,
)
from .rng import generator

__all__ = [
    "ChainOutput",
    "SamplerConfig",
    "alpha0_full_conditional",
    "alpha_full_conditional",
    "gibbs_update_alpha",
    "gibbs_update_gamma",
    "gibbs_update_variances",
    "inverse_gamma_posterior",
    "mh_update_block",
    "mh_update_blocks",
    "ml_prior_means",
    "run_chain",
    "run_chains",
    "target_acceptance",
    "variance_posteriors",
    "warm_start_state",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 35000
    burn_in: int = 5000
    thin: int = 30
    seed: int = 0
    chains: int = 1
    adapt_window: int = 50
    target_accept: float | None = None
    warm_start: bool = False
    progress_every: int = 1000

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1 or self.chains < 1 or self.adapt_window < 1:
            raise ValueError("thin, chains and adapt_window must be >= 1")
        if self.target_accept is not None and not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")

    @property
    def stored_draws(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "SamplerConfig":
        d = {k: v for k, v in dict(d).items() if k != "schema_version"}
        return cls(**d)


@dataclass
class ChainOutput:
    """Stored draws of one chain.

    ``samples`` is (L, K) with columns ``names``; ``layout`` rebuilds a
    :class:`ParameterState` from a row.
    """

    names: list[str]
    layout: list
    samples: np.ndarray
    log_likelihoods: np.ndarray
    deviances: np.ndarray
    acceptance_rates: dict
    tuning: dict
    chain: int = 0
    config: SamplerConfig | None = None
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.samples.shape[0]

    def state(self, l: int) -> ParameterState:
        return ParameterState.from_flat(self.samples[l], self.layout)

    @property
    def draws(self) -> list[ParameterState]:
        return [self.state(l) for l in range(len(self))]

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, self.names.index(name)]


# ---------------------------------------------------------------------------
# Metropolis kernel


def mh_update_blocks(current, log_target: Callable, scale, rng: np.random.Generator, current_value=None):
    """Random-walk Metropolis on B independent blocks.

    Parameters
    ----------
    current : (B, d) array
    log_target : callable mapping a (B, d) array to (B,) log densities
    scale : (B, d) or broadcastable proposal standard deviations
    current_value : optional (B,) cached ``log_target(current)``

    Returns
    -------
    new : (B, d) array, accepted : (B,) bool, value : (B,) log target at new
    """
    current = np.asarray(current, dtype=float)
    if current_value is None:
        current_value = np.asarray(log_target(current), dtype=float)
    if not np.all(np.isfinite(current_value)):
        raise ValueError("log target is not finite at the current state")
    proposal = current + scale * rng.standard_normal(current.shape)
    prop_value = np.asarray(log_target(proposal), dtype=float)
    log_ratio = np.where(np.isnan(prop_value), -np.inf, prop_value - current_value)
    # log(1 - u) with u in [0, 1) is finite; compare in log space
    accepted = np.log1p(-rng.random(current.shape[0])) < log_ratio
    new = np.where(accepted[:, None], proposal, current)
    value = np.where(accepted, prop_value, current_value)
    return new, accepted, value


def mh_update_block(current, logpost: Callable, scale, rng: np.random.Generator):
    """Single-block version of :func:`mh_update_blocks`; returns ``(new, accepted)``."""
    cur = np.atleast_1d(np.asarray(current, dtype=float))
    new, acc, _ = mh_update_blocks(
        cur[None], lambda b: np.array([logpost(b[0])]), np.asarray(scale, dtype=float)[None], rng
    )
    return new[0], bool(acc[0])


def target_acceptance(dim: int) -> float:
    """0.44 for scalar blocks, 0.234 from dimension 5 on, linear in between."""
    if dim <= 1:
        return 0.44
    if dim >= 5:
        return 0.234
    return 0.44 + (dim - 1) * (0.234 - 0.44) / 4.0


class _Adapter:
    """Robbins-Monro log-scale factor times an empirical per-component sd."""

    def __init__(self, n_blocks, dim, window, target):
        self.base = np.full((n_blocks, dim), 0.1)
        self.log_factor = np.zeros(n_blocks)
        self.window = window
        self.target = target_acceptance(dim) if target is None else target
        self.dim = dim
        self.window_acc = np.zeros(n_blocks)
        self.total_acc = np.zeros(n_blocks)
        self.total_n = 0
        self.k = 0
        self.history: list[np.ndarray] = []
        self.empirical = False

    @property
    def scale(self):
        return np.exp(self.log_factor)[:, None] * self.base

    def record(self, accepted, values, adapting):
        if adapting:
            self.window_acc += accepted
            self.history.append(values.copy())
        else:
            self.total_acc += accepted
            self.total_n += 1

    def adapt(self):
        self.k += 1
        rate = self.window_acc / self.window
        self.window_acc[:] = 0.0
        self.log_factor += (rate - self.target) / np.sqrt(self.k)
        if self.k >= 4:
            recent = np.asarray(self.history[len(self.history) // 2:])
            sd = recent.std(axis=0)
            ok = sd > 1e-12
            if ok.any():
                self.base = np.where(ok, sd, self.base)
                if not self.empirical:
                    self.log_factor[:] = np.log(2.38 / np.sqrt(self.dim))
                    self.empirical = True

    def rates(self):
        if self.total_n == 0:
            return np.full_like(self.total_acc, np.nan)
        return self.total_acc / self.total_n


# ---------------------------------------------------------------------------
# Gibbs full conditionals


def _walk_conditional(children, child_var, walk, walk0, W, t):
    """Gaussian full conditional of a random-walk node with hierarchical children.

    children (G, T, d) ~ N(walk_t, child_var_g); walk_t ~ N(walk_{t-1}, W).
    """
    T = walk.shape[0]
    prev = walk0 if t == 0 else walk[t - 1]
    prec = np.sum(1.0 / child_var, axis=0) + 1.0 / W
    num = np.sum(children[:, t] / child_var, axis=0) + prev / W
    if t < T - 1:
        prec = prec + 1.0 / W
        num = num + walk[t + 1] / W
    return num / prec, 1.0 / prec


def _walk0_conditional(walk, W, m0, C0):
    prec = 1.0 / C0 + 1.0 / W
    return (m0 / C0 + walk[0] / W) / prec, 1.0 / prec


def alpha_full_conditional(state: ParameterState, spec: ModelSpec, t: int):
    """Mean and variance (componentwise) of alpha_t given everything else; t is 0-based."""
    return _walk_conditional(state.beta, state.V_beta, state.alpha, state.alpha0, state.W_alpha, t)


def alpha0_full_conditional(state: ParameterState, spec: ModelSpec):
    return _walk0_conditional(state.alpha, state.W_alpha, spec.prior.m0_alpha(spec.p), spec.prior.initial_variance)


def gibbs_update_alpha(state: ParameterState, spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw alpha_1..alpha_T in turn, then alpha_0; updates ``state`` in place."""
    for t in range(state.alpha.shape[0]):
        mean, var = alpha_full_conditional(state, spec, t)
        state.alpha[t] = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
    mean, var = alpha0_full_conditional(state, spec)
    state.alpha0[:] = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
    return state.alpha


def gibbs_update_gamma(state: ParameterState, spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Gamma walk update for M4/M5; derived level average otherwise."""
    if not spec.has_gamma_walk:
        sync_derived(state, spec)
        return state.gamma
    for t in range(state.gamma.shape[0]):
        mean, var = _walk_conditional(state.delta, state.V_delta, state.gamma, state.gamma0, state.W_gamma, t)
        state.gamma[t] = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
    mean, var = _walk0_conditional(state.gamma, state.W_gamma, spec.prior.m0_gamma(spec.q), spec.prior.initial_variance)
    state.gamma0[:] = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
    return state.gamma


def inverse_gamma_posterior(shape, rate, deviations, axis=0):
    """Conjugate update ``IG(a + n/2, b + sum(dev^2)/2)`` along ``axis``."""
    dev = np.asarray(deviations, dtype=float)
    n = dev.shape[axis] if dev.ndim else 1
    return shape + 0.5 * n, rate + 0.5 * np.sum(dev ** 2, axis=axis)


def variance_posteriors(state: ParameterState, spec: ModelSpec) -> dict:
    """Full-conditional (shape, rate) for every active variance block."""
    pr = spec.prior
    a = pr.variance_shape
    I, T, p = state.beta.shape
    out = {
        "V_beta": inverse_gamma_posterior(a, pr.rate("V_beta", (I, p)), state.beta - state.alpha[None], axis=1),
        "W_alpha": inverse_gamma_posterior(
            a, pr.rate("W_alpha", (p,)), np.diff(np.vstack([state.alpha0, state.alpha]), axis=0), axis=0
        ),
    }
    if spec.has_gamma_walk:
        out["V_delta"] = inverse_gamma_posterior(
            a, pr.rate("V_delta", state.V_delta.shape), state.delta - state.gamma[None], axis=1
        )
        out["W_gamma"] = inverse_gamma_posterior(
            a, pr.rate("W_gamma", (spec.q,)), np.diff(np.vstack([state.gamma0, state.gamma]), axis=0), axis=0
        )
    return out


def gibbs_update_variances(state: ParameterState, spec: ModelSpec, rng: np.random.Generator) -> ParameterState:
    for name, (shape, rate) in variance_posteriors(state, spec).items():
        rate = np.asarray(rate, dtype=float)
        getattr(state, name)[...] = rate / rng.gamma(shape, size=rate.shape)
    return state


# ---------------------------------------------------------------------------
# warm start


def _fit_cell(y, X, Q, family):
    """Maximum-likelihood (beta, delta) for one cell; None when it fails."""
    p, q = X.shape[1], Q.shape[1]
    if y.size < p + q + 1:
        return None
    logy, log1my = np.log(y), np.log1p(-y)
    if family == "normal_logit":
        ystar = logy - log1my
        coef, *_ = np.linalg.lstsq(X, ystar, rcond=None)
        resid = ystar - X @ coef
        d = np.zeros(q)
        d[0] = np.log(max(resid.var(), 1e-8))  # phi = 1/var = exp(-d0)
        return coef, d

    def negll(theta):
        eta, zeta = X @ theta[:p], Q @ theta[p:]
        return -np.sum(_beta_ll(logy, log1my, eta, zeta))

    def grad(theta):
        eta, zeta = X @ theta[:p], Q @ theta[p:]
        mu, phi = expit(eta), np.exp(-zeta)
        a, b = mu * phi, (1 - mu) * phi
        d_mu = phi * (digamma(b) - digamma(a) + logy - log1my)
        d_phi = digamma(phi) - mu * digamma(a) - (1 - mu) * digamma(b) + mu * logy + (1 - mu) * log1my
        g_eta = d_mu * mu * (1 - mu)
        g_zeta = -d_phi * phi
        return -np.concatenate([X.T @ g_eta, Q.T @ g_zeta])

    m, v = y.mean(), y.var()
    theta0 = np.zeros(p + q)
    theta0[0] = np.log(m / (1 - m))
    theta0[p] = -np.log(max(m * (1 - m) / max(v, 1e-8) - 1.0, 0.5))
    res = minimize(negll, theta0, jac=grad, method="BFGS")
    if not np.all(np.isfinite(res.x)):
        return None
    return res.x[:p], res.x[p:]


def _cell_fits(table: ObservationTable, spec: ModelSpec):
    I, T = table.n_levels, table.n_years
    beta = np.full((I, T, spec.p), np.nan)
    delta = np.full((I, T, spec.q), np.nan)
    for i in range(I):
        for t in range(T):
            rows = table.cell == i * T + t
            fit = _fit_cell(table.y[rows], table.X[rows], table.Q[rows], spec.family)
            if fit is not None:
                beta[i, t], delta[i, t] = fit
    return beta, delta


def warm_start_state(table: ObservationTable, spec: ModelSpec) -> ParameterState:
    """Initial state from independent per-(level, year) maximum-likelihood fits."""
    state = initial_state(table.n_levels, table.n_years, spec)
    beta, delta = _cell_fits(table, spec)
    if np.all(np.isnan(beta)):
        return state
    state.beta[:] = np.where(np.isnan(beta), 0.0, beta)
    state.alpha[:] = np.nan_to_num(np.nanmean(beta, axis=0))
    state.alpha0[:] = state.alpha[0]
    di, dt, _ = state.delta.shape
    full = np.where(np.isnan(delta), np.nan, delta)
    if di == 1:
        full = np.nanmean(full, axis=0, keepdims=True)
    if dt == 1:
        full = np.nanmean(full, axis=1, keepdims=True)
    state.delta[:] = np.nan_to_num(full)
    if spec.has_gamma_walk:
        state.gamma[:] = state.delta.mean(axis=0)
        state.gamma0[:] = state.gamma[0]
    sync_derived(state, spec)
    return state


def ml_prior_means(table: ObservationTable, spec: ModelSpec, floor: float = 1e-3) -> ModelSpec:
    """Spec whose variance prior means come from per-cell maximum-likelihood fits."""
    from dataclasses import replace

    beta, delta = _cell_fits(table, spec)
    alpha = np.nanmean(beta, axis=0)
    gamma = np.nanmean(delta, axis=0)
    means = dict(spec.prior.variance_means)

    def msq(x, axis):
        return np.maximum(np.nan_to_num(np.nanmean(x ** 2, axis=axis), nan=floor), floor)

    means["V_beta"] = msq(beta - alpha[None], 1).tolist()
    means["W_alpha"] = msq(np.diff(alpha, axis=0), 0).tolist() if alpha.shape[0] > 1 else means["W_alpha"]
    if spec.variant == "M5":
        means["V_delta"] = msq(delta - gamma[None], 1).tolist()
    elif spec.variant == "M4":
        means["V_delta"] = msq(delta - gamma[None], (0, 1)).tolist()
    if gamma.shape[0] > 1:
        means["W_gamma"] = msq(np.diff(gamma, axis=0), 0).tolist()
    return replace(spec, prior=replace(spec.prior, variance_means=means))


# ---------------------------------------------------------------------------
# chain driver


class _Chain:
    def __init__(self, table: ObservationTable, spec: ModelSpec, config: SamplerConfig, chain: int):
        if (table.p, table.q) != (spec.p, spec.q):
            raise ValueError(f"table has p={table.p}, q={table.q}; spec expects p={spec.p}, q={spec.q}")
        self.table, self.spec, self.config = table, spec, config
        self.rng = generator(config.seed, "chain", chain)
        self.I, self.T = table.n_levels, table.n_years
        self.logy = np.log(table.y)
        self.log1my = np.log1p(-table.y)
        self.ystar = self.logy - self.log1my
        self.cell = table.cell
        state = warm_start_state(table, spec) if config.warm_start else initial_state(self.I, self.T, spec)
        check_state(state, spec, self.I, self.T)
        self.state = state
        di, dt, q = state.delta.shape
        units = np.arange(di * dt).reshape(di, dt)
        self.unit_of_cell = np.broadcast_to(units, (self.I, self.T)).ravel()
        self.unit_of_obs = self.unit_of_cell[self.cell]
        self.n_units = di * dt
        self.beta_adapt = _Adapter(self.I * self.T, spec.p, config.adapt_window, config.target_accept)
        self.delta_adapt = _Adapter(self.n_units, q, config.adapt_window, config.target_accept)
        self.eta = np.einsum("np,np->n", table.X, state.beta.reshape(-1, spec.p)[self.cell])
        self.zeta = np.einsum("nq,nq->n", table.Q, state.delta.reshape(-1, q)[self.unit_of_obs])
        self.ll = self._obs_ll(self.eta, self.zeta)
        self._check_initial()

    def _obs_ll(self, eta, zeta):
        if self.spec.family == "beta":
            return _beta_ll(self.logy, self.log1my, eta, zeta)
        return _normal_ll(self.ystar, eta, zeta)

    def _check_initial(self):
        if not np.all(np.isfinite(self.ll)):
            k = int(np.flatnonzero(~np.isfinite(self.ll))[0])
            raise ValueError(f"non-finite likelihood at initialization for observation {self.table.index(k)}")
        try:
            lp = log_prior(self.state, self.spec)
        except ValueError as exc:
            raise ValueError(f"invalid initial state: {exc}") from exc
        if not np.isfinite(lp):
            for name in ("beta", "delta", "alpha", "gamma"):
                if not np.all(np.isfinite(getattr(self.state, name))):
                    raise ValueError(f"non-finite initial block {name}")
            raise ValueError("non-finite log prior at initialization")

    # beta blocks -----------------------------------------------------------
    def _beta_prior(self, b):
        s = self.state
        b = b.reshape(self.I, self.T, -1)
        return (-0.5 * (b - s.alpha[None]) ** 2 / s.V_beta[:, None, :]).sum(axis=2).ravel()

    def step_beta(self, adapting):
        s, p = self.state, self.spec.p
        n_cells = self.I * self.T
        cache = {}

        def target(b):
            eta = np.einsum("np,np->n", self.table.X, b[self.cell])
            ll = self._obs_ll(eta, self.zeta)
            cache["eta"], cache["ll"] = eta, ll
            return np.bincount(self.cell, weights=ll, minlength=n_cells) + self._beta_prior(b)

        current = s.beta.reshape(n_cells, p)
        cur_val = np.bincount(self.cell, weights=self.ll, minlength=n_cells) + self._beta_prior(current)
        new, acc, _ = mh_update_blocks(current, target, self.beta_adapt.scale, self.rng, cur_val)
        s.beta[...] = new.reshape(s.beta.shape)
        obs_acc = acc[self.cell]
        self.eta = np.where(obs_acc, cache["eta"], self.eta)
        self.ll = np.where(obs_acc, cache["ll"], self.ll)
        self.beta_adapt.record(acc, new, adapting)

    # delta units -----------------------------------------------------------
    def _delta_prior(self, d):
        s, spec = self.state, self.spec
        di, dt, q = s.delta.shape
        d = d.reshape(di, dt, q)
        if spec.has_gamma_walk:
            lp = -0.5 * (d - s.gamma[None]) ** 2 / s.V_delta[:, None, :]
        else:
            lp = -0.5 * (d - spec.prior.m0_gamma(q)) ** 2 / spec.prior.initial_variance
        return lp.sum(axis=2).ravel()

    def step_delta(self, adapting):
        s = self.state
        q = s.delta.shape[2]
        cache = {}

        def target(d):
            zeta = np.einsum("nq,nq->n", self.table.Q, d[self.unit_of_obs])
            ll = self._obs_ll(self.eta, zeta)
            cache["zeta"], cache["ll"] = zeta, ll
            return np.bincount(self.unit_of_obs, weights=ll, minlength=self.n_units) + self._delta_prior(d)

        current = s.delta.reshape(self.n_units, q)
        cur_val = np.bincount(self.unit_of_obs, weights=self.ll, minlength=self.n_units) + self._delta_prior(current)
        new, acc, _ = mh_update_blocks(current, target, self.delta_adapt.scale, self.rng, cur_val)
        s.delta[...] = new.reshape(s.delta.shape)
        obs_acc = acc[self.unit_of_obs]
        self.zeta = np.where(obs_acc, cache["zeta"], self.zeta)
        self.ll = np.where(obs_acc, cache["ll"], self.ll)
        self.delta_adapt.record(acc, new, adapting)

    def sweep(self, adapting):
        self.step_beta(adapting)
        gibbs_update_alpha(self.state, self.spec, self.rng)
        self.step_delta(adapting)
        gibbs_update_gamma(self.state, self.spec, self.rng)
        gibbs_update_variances(self.state, self.spec, self.rng)


def run_chain(table: ObservationTable, spec: ModelSpec, config: SamplerConfig, chain: int = 0) -> ChainOutput:
    """Run one chain; deterministic given ``(table, spec, config, chain)``."""
    start = time.perf_counter()
    ch = _Chain(table, spec, config, chain)
    names = ch.state.names(spec)
    layout = ch.state.layout()
    L = config.stored_draws
    samples = np.empty((L, len(names)))
    lls = np.empty(L)
    stored = 0
    for it in range(1, config.iterations + 1):
        adapting = it <= config.burn_in
        ch.sweep(adapting)
        if adapting and it % config.adapt_window == 0:
            ch.beta_adapt.adapt()
            ch.delta_adapt.adapt()
        if not adapting and (it - config.burn_in) % config.thin == 0 and stored < L:
            samples[stored] = ch.state.flatten()
            lls[stored] = float(np.sum(ch.ll))
            stored += 1
        if config.progress_every and it % config.progress_every == 0:
            log.info("chain %d: iteration %d/%d", chain, it, config.iterations)
    di, dt, q = ch.state.delta.shape
    return ChainOutput(
        names=names,
        layout=layout,
        samples=samples,
        log_likelihoods=lls,
        deviances=-2.0 * lls,
        acceptance_rates={
            "beta": ch.beta_adapt.rates().reshape(ch.I, ch.T),
            "delta": ch.delta_adapt.rates().reshape(di, dt),
        },
        tuning={
            "beta": ch.beta_adapt.scale.reshape(ch.I, ch.T, spec.p),
            "delta": ch.delta_adapt.scale.reshape(di, dt, q),
        },
        chain=chain,
        config=config,
        wall_time=time.perf_counter() - start,
    )


def _run_one(args):
    return run_chain(*args)


def run_chains(table: ObservationTable, spec: ModelSpec, config: SamplerConfig, workers: int = 1) -> list[ChainOutput]:
    """Run ``config.chains`` independent chains, optionally in worker processes."""
    jobs = [(table, spec, config, c) for c in range(config.chains)]
    if workers <= 1 or config.chains == 1:
        return [_run_one(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))
