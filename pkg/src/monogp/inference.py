"""
Posterior inference for the constrained spatio-temporal GP.

Without sign observations every likelihood term is Gaussian: latents are
integrated out exactly and the hyperparameters are sampled from their marginal
posterior.  With sign observations the sampler alternates

1. a random-walk Metropolis move on log-hyperparameters with the derivative
   values u at the sign points moved along, their whitened residual
   L22^-1 (u - m_u) held fixed (non-centered); the centered variant, u itself
   held fixed, can be added with ``SamplerConfig(centered=True)``,
2. elliptical slice updates of u given the hyperparameters, using the Gaussian
   conditional of u given all Gaussian observations as the ellipse prior.

The rest of the latent vector is integrated out throughout.

Predictions given (hyperparameters, u) are Gaussian, so mixtures over draws
are Rao-Blackwellized.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import log_ndtr

from .errors import (ConditioningError, ConfigError, DiagnosticError, DomainError,
                     InitializationError)
from .kernel import (DEFAULT_GROUPS, JITTER_START, DerivativeSpec, Hyperparameters, InputPoint,
                     PairGeometry, cross_cov, jitter_cholesky)
from .model import LOG_2PI, ObservationSet, PriorSpec, log_prior

log = logging.getLogger(__name__)

DEFAULT_MAX_ROWS = 2000
Z95 = 1.959963984540054


def max_rows():
    value = os.environ.get("MONOGP_MAX_DIM")
    return int(value) if value else DEFAULT_MAX_ROWS


def _check_scale(n_rows):
    cap = max_rows()
    if n_rows > cap:
        raise ConfigError(f"{n_rows} covariance rows exceed the dense-solver cap of {cap}; "
                          "set MONOGP_MAX_DIM to raise it")


def _as_rows(test, dim):
    """Accept a list of InputPoint / DerivativeSpec or an (X, wrt) tuple."""
    if isinstance(test, tuple) and len(test) == 2 and isinstance(test[0], np.ndarray):
        X, wrt = test
        return np.atleast_2d(np.asarray(X, float)).reshape(-1, dim), np.asarray(wrt, int)
    points = [t for t in test if isinstance(t, InputPoint)]
    derivs = [t for t in test if isinstance(t, DerivativeSpec)]
    if len(points) + len(derivs) != len(test):
        raise DomainError("test items must be InputPoint or DerivativeSpec")
    # keep caller order
    X = np.array([t.values if isinstance(t, InputPoint) else t.point.values for t in test],
                 dtype=float).reshape(-1, dim)
    wrt = np.array([-1 if isinstance(t, InputPoint) else t.wrt_dimension for t in test], dtype=int)
    return X, wrt


def _psd_sqrt(C):
    C = 0.5 * (C + C.T)
    w, V = np.linalg.eigh(C)
    return V * np.sqrt(np.clip(w, 0.0, None))


class GaussianState:
    """
    Gaussian observation model at fixed hyperparameters.

    Rows are the Gaussian observations of ``obs`` (noisy regular values, then
    A and B anchors) followed, when ``with_signs``, by the sign-point
    derivatives u treated as exactly observed.  One Cholesky factor of that
    augmented covariance serves the marginal likelihood of [y; u], the
    conditional of u given y, and predictions.
    """

    def __init__(self, obs: ObservationSet, hp: Hyperparameters, with_signs=None,
                 jitter=JITTER_START):
        lay = obs.layout
        self.lay = lay
        self.hp = hp
        self.with_signs = obs.has_signs if with_signs is None else with_signs
        self.n0 = lay.gauss_latent.size
        with_c = bool(self.with_signs and lay.C_latent.size)
        X, wrt, geometry = lay.observation_rows(with_c)
        if X.size == 0:
            X = np.zeros((0, hp.dim))
            geometry = PairGeometry(X, wrt, X, wrt)
        _check_scale(X.shape[0])
        noise = lay.gauss_noise(hp.sigma)
        if with_c:
            noise = np.concatenate([noise, np.zeros(lay.C_latent.size)])
        self.X, self.wrt = X, wrt
        K = geometry.cov(hp)
        K[np.diag_indices_from(K)] += noise
        self.L, self.jitter = jitter_cholesky(K, jitter)
        self.y = lay.gauss_y
        n0 = self.n0
        self.w = solve_triangular(self.L[:n0, :n0], self.y, lower=True) if n0 else np.zeros(0)
        self.m_u = self.L[n0:, :n0] @ self.w
        self.L22 = self.L[n0:, n0:]
        self._logdet_half = np.sum(np.log(np.diag(self.L)))

    @property
    def n_signs(self):
        return self.X.shape[0] - self.n0

    def log_marginal(self, u=None) -> float:
        """log N([y; u] | 0, K_aug); ``u`` is required iff sign rows are present."""
        quad = self.w @ self.w
        if self.n_signs:
            e = solve_triangular(self.L22, np.asarray(u, float) - self.m_u, lower=True)
            quad += e @ e
        return float(-0.5 * (self.X.shape[0] * LOG_2PI + quad) - self._logdet_half)

    def log_marginal_y(self) -> float:
        """log N(y | 0, K_yy), ignoring any sign rows."""
        n0 = self.n0
        return float(-0.5 * (n0 * LOG_2PI + self.w @ self.w)
                     - np.sum(np.log(np.diag(self.L)[:n0])))

    def whiten(self, u):
        return solve_triangular(self.L22, np.asarray(u, float) - self.m_u, lower=True)

    def unwhiten(self, eps):
        return self.m_u + self.L22 @ eps

    def _targets(self, u):
        if self.n_signs:
            return np.concatenate([self.y, np.asarray(u, float)])
        return self.y

    def predict(self, X_test, wrt_test, u=None, full_cov=False):
        """Latent predictive mean and (co)variance at test rows."""
        Ks = cross_cov(X_test, wrt_test, self.X, self.wrt, self.hp)
        prior = cross_cov(X_test, wrt_test, X_test, wrt_test, self.hp)
        if self.X.shape[0] == 0:
            mean = np.zeros(X_test.shape[0])
            return (mean, prior) if full_cov else (mean, np.diag(prior).copy())
        beta = cho_solve((self.L, True), self._targets(u), check_finite=False)
        mean = Ks @ beta
        V = solve_triangular(self.L, Ks.T, lower=True, check_finite=False)
        if full_cov:
            return mean, prior - V.T @ V
        return mean, np.clip(np.diag(prior) - np.sum(V * V, axis=0), 0.0, None)


def _sign_loglik(u, z, v):
    return float(np.sum(log_ndtr(z * u / v)))


def elliptical_slice(u, mean, chol, loglik, rng, current_ll=None, max_shrinks=500):
    """
    One elliptical slice sampling update for a target N(u | mean, chol chol^T) * exp(loglik(u)).

    Returns the new state and its log-likelihood.
    """
    ll = loglik(u) if current_ll is None else current_ll
    nu = chol @ rng.standard_normal(u.size)
    threshold = ll + math.log(rng.uniform())
    centered = u - mean
    phi = rng.uniform(0.0, 2.0 * math.pi)
    lo, hi = phi - 2.0 * math.pi, phi
    for _ in range(max_shrinks):
        prop = mean + centered * math.cos(phi) + nu * math.sin(phi)
        prop_ll = loglik(prop)
        if prop_ll > threshold:
            return prop, prop_ll
        if phi > 0:
            hi = phi
        else:
            lo = phi
        phi = rng.uniform(lo, hi)
    return u, ll


# -- exact conditioning ---------------------------------------------------------------

@dataclass
class PredictiveDistribution:
    mean: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray
    draw_matrix: np.ndarray | None = None
    cov: np.ndarray | None = None
    # per-draw Gaussian components (draws x points), used for log densities
    component_mean: np.ndarray | None = None
    component_var: np.ndarray | None = None

    @property
    def std(self):
        if self.cov is not None:
            return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))
        if self.component_mean is not None:
            var = self.component_var.mean(0) + self.component_mean.var(0)
            return np.sqrt(var)
        return (self.upper95 - self.lower95) / (2 * Z95)

    def log_density(self, y):
        """Pointwise log predictive density as a mixture of the per-draw Gaussians."""
        y = np.asarray(y, float)
        if self.component_mean is None:
            m, var = self.mean[None, :], np.diag(self.cov)[None, :]
        else:
            m, var = self.component_mean, self.component_var
        var = np.maximum(var, 1e-300)
        lp = -0.5 * (LOG_2PI + np.log(var) + (y[None, :] - m) ** 2 / var)
        top = lp.max(0)
        return top + np.log(np.mean(np.exp(lp - top), axis=0))

    def pit(self, y):
        """Fraction of predictive draws at or below each observed value."""
        if self.draw_matrix is None or self.draw_matrix.shape[0] == 0:
            raise ConfigError("no predictive draws available for PIT")
        return np.mean(self.draw_matrix <= np.asarray(y, float)[None, :], axis=0)


def condition_gaussian(train: ObservationSet, test, hp: Hyperparameters) -> PredictiveDistribution:
    """Exact Gaussian predictive of latent values / derivatives at ``test``."""
    if train.has_signs:
        raise DomainError("condition_gaussian requires an observation set without sign "
                          "observations; use sample_latents_constrained")
    dim = hp.dim
    X, wrt = _as_rows(test, dim)
    state = GaussianState(train, hp, with_signs=False)
    mean, cov = state.predict(X, wrt, full_cov=True)
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return PredictiveDistribution(mean=mean, lower95=mean - Z95 * sd, upper95=mean + Z95 * sd,
                                  cov=cov)


# -- latent sampling at fixed hyperparameters ------------------------------------------

@dataclass
class LatentDraws:
    f: np.ndarray          # draws x function points (layout order)
    f_prime: np.ndarray    # draws x derivative rows (layout order)
    sign_values: np.ndarray


def _latent_conditional(state: GaussianState):
    """Mean map and covariance square root of the full latent vector given [y; u]."""
    lay, hp = state.lay, state.hp
    Kg = cross_cov(lay.X, lay.wrt, state.X, state.wrt, hp)
    prior = cross_cov(lay.X, lay.wrt, lay.X, lay.wrt, hp)
    V = solve_triangular(state.L, Kg.T, lower=True, check_finite=False)
    return Kg, _psd_sqrt(prior - V.T @ V)


def sample_latents_constrained(obs: ObservationSet, hp: Hyperparameters, n_draws: int,
                               seed: int = 0, burn: int = 200, thin: int = 1) -> LatentDraws:
    """
    Draws of (f, f') from their conditional posterior at fixed hyperparameters.

    Only the derivative values at the sign points are non-Gaussian; they are
    moved by elliptical slice sampling, and every other latent value is drawn
    from its exact Gaussian conditional.
    """
    if not obs.has_signs:
        raise DomainError("no sign observations: use condition_gaussian")
    rng = np.random.default_rng(seed)
    lay = obs.layout
    state = GaussianState(obs, hp, with_signs=True)
    z, v = lay.z, obs.strictness_v

    def loglik(u):
        return _sign_loglik(u, z, v)

    u = state.m_u.copy()
    ll = loglik(u)
    kept = []
    for it in range(burn + n_draws * thin):
        u, ll = elliptical_slice(u, state.m_u, state.L22, loglik, rng, ll)
        if it >= burn and (it - burn) % thin == 0:
            kept.append(u.copy())
    U = np.array(kept)

    Kg, root = _latent_conditional(state)
    out = np.empty((len(kept), lay.n_f + lay.n_d))
    for s, u in enumerate(U):
        beta = cho_solve((state.L, True), state._targets(u), check_finite=False)
        out[s] = Kg @ beta + root @ rng.standard_normal(root.shape[1])
    return LatentDraws(f=out[:, :lay.n_f], f_prime=out[:, lay.n_f:], sign_values=U)


# -- hyperparameter sampling -------------------------------------------------------------

@dataclass
class SamplerConfig:
    chains: int = 3
    warmup: int = 2000
    draws: int = 2000
    thin: int = 3
    seed: int = 0
    target_accept: float = 0.3
    init_jitter: float = 0.3
    ess_steps: int = 2
    interweave: bool = True
    centered: bool = False
    store_latents: bool = False
    optimize_init: bool = True

    def __post_init__(self):
        if self.chains < 2:
            raise ConfigError("at least 2 chains are needed for split-Rhat")
        if self.draws < 4 or self.warmup < 0 or self.thin < 1:
            raise ConfigError("need draws >= 4, warmup >= 0 and thin >= 1")
        if not 0 < self.target_accept < 1:
            raise ConfigError("target_accept must lie in (0, 1)")


@dataclass
class PosteriorSamples:
    params: np.ndarray              # chains x draws x P, natural scale
    names: list
    groups: tuple
    warmup_count: int
    seed: int
    sign_latents: np.ndarray | None = None   # chains x draws x |C|
    sign_keys: list = field(default_factory=list)
    log_target: np.ndarray | None = None
    accept_rate: np.ndarray | None = None
    latent_f: np.ndarray | None = None       # chains x draws x n_f
    latent_fprime: np.ndarray | None = None  # chains x draws x n_d

    @property
    def n_chains(self):
        return self.params.shape[0]

    @property
    def n_draws(self):
        return self.params.shape[1]

    def hyperparameters(self, chain, draw) -> Hyperparameters:
        return Hyperparameters.from_vector(self.params[chain, draw], self.groups)

    def flat(self, max_draws=None):
        """(hyperparameters, sign latents) pairs pooled over chains, evenly thinned."""
        P = self.params.reshape(-1, self.params.shape[-1])
        U = None if self.sign_latents is None else self.sign_latents.reshape(P.shape[0], -1)
        idx = np.arange(P.shape[0])
        if max_draws is not None and P.shape[0] > max_draws:
            idx = np.unique(np.linspace(0, P.shape[0] - 1, max_draws).round().astype(int))
        return [(Hyperparameters.from_vector(P[i], self.groups),
                 None if U is None else U[i]) for i in idx]

    @classmethod
    def single(cls, hp: Hyperparameters, seed=0):
        """Degenerate samples holding one fixed hyperparameter draw."""
        vec = hp.as_vector()[None, None, :]
        return cls(params=vec, names=Hyperparameters.names(len(hp.lengthscales)),
                   groups=hp.groups, warmup_count=0, seed=seed)


_PHI_BOUND = 20.0


class _Target:
    """Log posterior of log-hyperparameters (with Jacobian), optionally given u."""

    def __init__(self, obs, ps, groups):
        self.obs, self.ps, self.groups = obs, ps, groups

    def state(self, phi, with_signs):
        if not np.all(np.isfinite(phi)) or np.any(np.abs(phi) > _PHI_BOUND):
            return None
        try:
            return GaussianState(self.obs, Hyperparameters.from_vector(np.exp(phi), self.groups),
                                 with_signs=with_signs)
        except ConditioningError:
            return None

    def value(self, phi, state, u=None):
        if state is None:
            return -np.inf
        lp = state.log_marginal(u) + log_prior(state.hp, self.ps) + float(np.sum(phi))
        return lp if np.isfinite(lp) else -np.inf

    def value_y(self, phi, state):
        """Log posterior terms that do not involve u: prior, Jacobian and y marginal."""
        if state is None:
            return -np.inf
        lp = state.log_marginal_y() + log_prior(state.hp, self.ps) + float(np.sum(phi))
        return lp if np.isfinite(lp) else -np.inf


def _initial_phi(obs, groups):
    lay = obs.layout
    y = lay.gauss_y[lay.gauss_is_noisy]
    scale = float(np.std(y)) if y.size > 1 and np.std(y) > 0 else 1.0
    n_groups = max(groups) + 1
    rho = np.ones(n_groups)
    X = lay.X
    for g in range(n_groups):
        dims = [d for d, gg in enumerate(groups) if gg == g]
        spread = float(np.max(np.std(X[:, dims], axis=0))) if X.shape[0] > 1 else 0.0
        rho[g] = spread if spread > 0 else 1.0
    return np.log(np.concatenate([[scale], rho, [0.3 * scale]]))


def _optimize_start(target, phi0):
    def neg(phi):
        val = target.value(phi, target.state(phi, with_signs=False))
        return 1e10 if not np.isfinite(val) else -val

    best = phi0
    best_val = neg(phi0)
    for shift in (0.0, 1.0, -1.0):
        start = phi0.copy()
        start[1:-1] += shift
        try:
            res = minimize(neg, start, method="L-BFGS-B",
                           bounds=[(-12.0, 8.0)] * phi0.size, options={"maxiter": 300})
        except (ValueError, FloatingPointError):
            continue
        if res.fun < best_val:
            best, best_val = res.x, res.fun
    return best, best_val


def _laplace_cov(target, phi, h=1e-3):
    """Inverse negative Hessian of the marginal log posterior, capped to sane variances."""
    d = phi.size

    def f(p):
        return target.value(p, target.state(p, with_signs=False))

    H = np.empty((d, d))
    f0 = f(phi)
    for i in range(d):
        for j in range(i, d):
            ei = np.zeros(d)
            ej = np.zeros(d)
            ei[i] = h
            ej[j] = h
            if i == j:
                H[i, i] = (f(phi + ei) - 2 * f0 + f(phi - ei)) / h ** 2
            else:
                H[i, j] = H[j, i] = (f(phi + ei + ej) - f(phi + ei - ej)
                                     - f(phi - ei + ej) + f(phi - ei - ej)) / (4 * h * h)
    fallback = np.eye(d) * 0.05
    if not np.all(np.isfinite(H)):
        return fallback
    w, V = np.linalg.eigh(-0.5 * (H + H.T))
    if np.any(w <= 0):
        w = np.where(w <= 0, 1.0, w)
    cov = (V / w) @ V.T
    sd = np.sqrt(np.clip(np.diag(cov), 1e-6, 4.0))
    corr = cov / np.sqrt(np.outer(np.diag(cov), np.diag(cov)))
    return corr * np.outer(sd, sd)


def _run_chain(target, obs, phi0, prop_cov0, cfg: SamplerConfig, rng, groups):
    d = phi0.size
    with_signs = obs.has_signs
    lay = obs.layout
    z, v = lay.z, obs.strictness_v

    def sign_ll(u):
        return _sign_loglik(u, z, v)

    phi = phi0.copy()
    state = target.state(phi, with_signs)
    if state is None:
        raise InitializationError("non-finite log posterior at the initial hyperparameters; "
                                  "widen init_jitter or check the data scaling")
    u = state.m_u.copy() if with_signs else None
    lp = target.value(phi, state, u)
    if not np.isfinite(lp):
        raise InitializationError("non-finite log posterior at initialization; "
                                  "widen init_jitter or check the data scaling")

    log_scale = math.log(2.38 / math.sqrt(d))
    mu = phi.copy()
    cov = prop_cov0.copy()
    chol = np.linalg.cholesky(cov + 1e-10 * np.eye(d))

    total = cfg.warmup + cfg.draws * cfg.thin
    params = np.empty((cfg.draws, d))
    lps = np.empty(cfg.draws)
    U = np.empty((cfg.draws, lay.C_latent.size)) if with_signs else None
    accepted = 0
    for it in range(total):
        if cfg.centered or not with_signs:
            prop = phi + math.exp(log_scale) * (chol @ rng.standard_normal(d))
            prop_state = target.state(prop, with_signs)
            prop_lp = target.value(prop, prop_state, u)
            log_ratio = prop_lp - lp
            accept_prob = 1.0 if log_ratio >= 0 else math.exp(log_ratio)
            if rng.uniform() < accept_prob:
                phi, state, lp = prop, prop_state, prop_lp
                if it >= cfg.warmup:
                    accepted += 1

        if with_signs and cfg.interweave:
            # non-centered move: whitened u held fixed while the hyperparameters change
            eps = state.whiten(u)
            prop = phi + math.exp(log_scale) * (chol @ rng.standard_normal(d))
            prop_state = target.state(prop, with_signs)
            if prop_state is not None:
                u_prop = prop_state.unwhiten(eps)
                cur = target.value_y(phi, state) + sign_ll(u)
                new = target.value_y(prop, prop_state) + sign_ll(u_prop)
                log_ratio = new - cur
                nc_prob = 1.0 if log_ratio >= 0 else (math.exp(log_ratio) if np.isfinite(new)
                                                      else 0.0)
                if rng.uniform() < nc_prob:
                    phi, state, u = prop, prop_state, u_prop
                    if it >= cfg.warmup and not cfg.centered:
                        accepted += 1
                if not cfg.centered:
                    accept_prob = nc_prob

        if with_signs:
            ll = sign_ll(u)
            for _ in range(cfg.ess_steps):
                u, ll = elliptical_slice(u, state.m_u, state.L22, sign_ll, rng, ll)
            lp = target.value(phi, state, u)

        if it < cfg.warmup:
            log_scale += (it + 1) ** -0.6 * (accept_prob - cfg.target_accept)
            if it >= 50:
                # running mean and covariance of the warmup path after a short burn
                w = 1.0 / (it - 48)
                delta = phi - mu
                mu = mu + w * delta
                cov = cov + w * (np.outer(delta, delta) - cov)
                try:
                    chol = np.linalg.cholesky(cov + 1e-8 * np.eye(d))
                except np.linalg.LinAlgError:
                    pass
        elif (it - cfg.warmup) % cfg.thin == cfg.thin - 1:
            k = (it - cfg.warmup) // cfg.thin
            params[k] = phi
            lps[k] = lp
            if with_signs:
                U[k] = u
    return np.exp(params), lps, U, accepted / max(cfg.draws * cfg.thin, 1)


def sample_hyperparameters(obs: ObservationSet, ps: PriorSpec = PriorSpec(),
                           config: SamplerConfig = SamplerConfig(),
                           groups=None) -> PosteriorSamples:
    """
    Adaptive random-walk Metropolis on log-hyperparameters.

    Latents are integrated out exactly when there are no sign observations;
    otherwise the sampler alternates with elliptical slice updates of the
    derivative values at the sign points.  Proposal scale and covariance adapt
    with diminishing gain during warmup only.
    """
    if not obs.regular and not obs.zero_start_A:
        raise DomainError("observation set holds no function observations")
    dim = obs.dim
    if groups is None:
        groups = DEFAULT_GROUPS if dim == len(DEFAULT_GROUPS) else tuple(range(dim))
    if len(groups) != dim:
        raise ConfigError(f"lengthscale groups {groups} do not match input dimension {dim}")
    target = _Target(obs, ps, tuple(groups))
    seeds = np.random.SeedSequence(int(config.seed))
    rngs = [np.random.default_rng(s) for s in seeds.spawn(config.chains + 1)]

    phi0 = _initial_phi(obs, groups)
    if config.optimize_init:
        phi_map, _ = _optimize_start(target, phi0)
        prop_cov = _laplace_cov(target, phi_map)
    else:
        phi_map, prop_cov = phi0, np.eye(phi0.size) * 0.05
    st = target.state(phi_map, obs.has_signs)
    if st is None or not np.isfinite(target.value(phi_map, st, st.m_u if obs.has_signs else None)):
        raise InitializationError("could not find a finite starting point; "
                                  "widen init_jitter or check the data scaling")

    chains = []
    for c in range(config.chains):
        rng = rngs[c]
        for attempt in range(20):
            start = phi_map + config.init_jitter * rng.standard_normal(phi_map.size)
            st = target.state(start, obs.has_signs)
            if st is not None and np.isfinite(target.value(start, st, st.m_u if obs.has_signs
                                                           else None)):
                break
        else:
            raise InitializationError("non-finite log posterior at every jittered start; "
                                      "widen init_jitter or check the data scaling")
        chains.append(_run_chain(target, obs, start, prop_cov, config, rng, groups))

    params = np.stack([c[0] for c in chains])
    samples = PosteriorSamples(
        params=params, names=Hyperparameters.names(max(groups) + 1), groups=tuple(groups),
        warmup_count=config.warmup, seed=config.seed,
        sign_latents=np.stack([c[2] for c in chains]) if obs.has_signs else None,
        sign_keys=list(obs.layout.C_keys),
        log_target=np.stack([c[1] for c in chains]),
        accept_rate=np.array([c[3] for c in chains]))
    if config.store_latents:
        attach_latents(samples, obs, rngs[-1])
    return samples


def attach_latents(samples: PosteriorSamples, obs: ObservationSet, rng=None):
    """Fill ``latent_f`` / ``latent_fprime`` with one conditional draw per stored draw."""
    rng = rng if rng is not None else np.random.default_rng(samples.seed)
    lay = obs.layout
    C, S = samples.n_chains, samples.n_draws
    out = np.empty((C, S, lay.n_f + lay.n_d))
    for c in range(C):
        for s in range(S):
            hp = samples.hyperparameters(c, s)
            state = GaussianState(obs, hp)
            u = None if samples.sign_latents is None else samples.sign_latents[c, s]
            Kg, root = _latent_conditional(state)
            beta = cho_solve((state.L, True), state._targets(u), check_finite=False)
            out[c, s] = Kg @ beta + root @ rng.standard_normal(root.shape[1])
    samples.latent_f = out[..., :lay.n_f]
    samples.latent_fprime = out[..., lay.n_f:]
    return samples


# -- prediction -----------------------------------------------------------------------

def _initial_u(stored, stored_keys, lay, state):
    """Sign latents for ``lay`` taken from a stored draw where keys match, else the conditional mean."""
    u = state.m_u.copy()
    if stored is None:
        return u, False
    if list(stored_keys) == list(lay.C_keys):
        return np.asarray(stored, float).copy(), True
    lookup = dict(zip(stored_keys, stored))
    complete = True
    for k, key in enumerate(lay.C_keys):
        if key in lookup:
            u[k] = lookup[key]
        else:
            complete = False
    return u, complete


def predict(samples: PosteriorSamples, obs: ObservationSet, test, include_noise=True,
            max_draws=None, seed=0, refresh_steps=None) -> PredictiveDistribution:
    """
    Posterior predictive at ``test`` mixed over the stored draws.

    Function-value rows predict new observations (noise added when
    ``include_noise``); derivative rows predict latent derivatives.  When
    ``obs`` has sign observations the stored sign latents are reused if they
    belong to the same sign set; otherwise, or when ``refresh_steps`` is
    given, they are refreshed by elliptical slice steps under ``obs``.
    """
    if samples.n_draws == 0:
        raise DomainError("no posterior draws")
    rng = np.random.default_rng(seed)
    lay = obs.layout
    X, wrt = _as_rows(test, obs.dim if obs.dim else samples.params.shape[-1])
    is_value = wrt < 0
    draws = samples.flat(max_draws)
    S, n = len(draws), X.shape[0]
    means = np.empty((S, n))
    variances = np.empty((S, n))
    sim = np.empty((S, n))
    z, v = lay.z, obs.strictness_v
    for s, (hp, stored_u) in enumerate(draws):
        state = GaussianState(obs, hp)
        u = None
        if obs.has_signs:
            u, reusable = _initial_u(stored_u, samples.sign_keys, lay, state)
            steps = refresh_steps if refresh_steps is not None else (0 if reusable else 20)
            ll = _sign_loglik(u, z, v)
            for _ in range(steps):
                u, ll = elliptical_slice(u, state.m_u, state.L22,
                                         lambda x: _sign_loglik(x, z, v), rng, ll)
        m, var = state.predict(X, wrt, u)
        if include_noise:
            var = var + np.where(is_value, hp.sigma ** 2, 0.0)
        means[s], variances[s] = m, var
        sim[s] = m + np.sqrt(var) * rng.standard_normal(n)

    mean = means.mean(0)
    if obs.has_signs:
        lower, upper = np.quantile(sim, [0.025, 0.975], axis=0)
    else:
        sd = np.sqrt(variances.mean(0) + means.var(0))
        lower, upper = mean - Z95 * sd, mean + Z95 * sd
    return PredictiveDistribution(mean=mean, lower95=lower, upper95=upper, draw_matrix=sim,
                                  component_mean=means, component_var=variances)


# -- convergence diagnostics ------------------------------------------------------------

def _as_chains(chains):
    arr = np.asarray(chains, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DiagnosticError("chains must be shaped (chains, draws) or (chains, draws, params)")
    if arr.shape[0] < 2:
        raise DiagnosticError("at least 2 chains are required")
    if arr.shape[1] < 4:
        raise DiagnosticError("at least 4 draws per chain are required")
    return arr


def _split(arr):
    n = arr.shape[1] // 2
    return np.concatenate([arr[:, :n], arr[:, -n:]], axis=0)


def split_rhat(chains, return_flags=False):
    """
    Classic split-chain potential scale reduction, one value per parameter.

    Zero within- and between-chain variance gives 1 with the zero-variance
    flag set.
    """
    arr = _split(_as_chains(chains))
    m, n, _ = arr.shape
    means = arr.mean(axis=1)
    W = arr.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    zero = (W == 0) & (B == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / W)
    rhat = np.where(zero, 1.0, np.where(W == 0, np.inf, rhat))
    return (rhat, zero) if return_flags else rhat


def _autocov(x):
    n = x.shape[-1]
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n]
    return acov / n


def effective_sample_size(chains):
    """Multi-chain effective sample size with Geyer's initial monotone sequence."""
    arr = _split(_as_chains(chains))
    m, n, P = arr.shape
    out = np.empty(P)
    for p in range(P):
        x = arr[:, :, p]
        acov = _autocov(x)
        W = acov[:, 0].mean() * n / (n - 1)
        var_plus = W * (n - 1) / n + (x.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
        if var_plus <= 0:
            out[p] = np.nan
            continue
        rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
        rho[0] = 1.0
        # Geyer: sum adjacent pairs while positive, forcing monotone decrease
        tau = -1.0
        prev = np.inf
        for k in range(0, n - 1, 2):
            pair = rho[k] + rho[k + 1]
            if pair < 0:
                break
            pair = min(pair, prev)
            tau += 2.0 * pair
            prev = pair
        out[p] = m * n / max(tau, 1.0 / np.log10(m * n))
    return out
