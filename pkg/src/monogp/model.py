"""
Observation models, hyperparameter priors and the unnormalized log posterior.

Observations come in four kinds:

* regular      noisy function values, N(y | f, sigma^2)
* zero_start_A near-noise-free function values fixed at 0
* saturation_B near-noise-free derivative values fixed at 0
* sign_C       derivative signs z in {-1, +1} with probit likelihood Phi(z f' / v)

Regular rows sharing a (location, time) key with an A point are replaced by the
anchor and drop out of the Gaussian term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln, log_ndtr

from .errors import DomainError, InputShapeError
from .kernel import Hyperparameters, InputPoint, PairGeometry, assemble_joint

DIRAC_VARIANCE = 1e-10
DEFAULT_STRICTNESS = 1e-4
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ObservationSet:
    regular: list = field(default_factory=list)
    zero_start_A: list = field(default_factory=list)
    saturation_B: list = field(default_factory=list)
    sign_C: list = field(default_factory=list)
    strictness_v: float = DEFAULT_STRICTNESS

    def __post_init__(self):
        self.regular = [(p, float(y)) for p, y in self.regular]
        self.zero_start_A = list(self.zero_start_A)
        self.saturation_B = list(self.saturation_B)
        self.sign_C = [(d, int(z)) for d, z in self.sign_C]
        if not self.strictness_v > 0:
            raise DomainError(f"strictness v must be positive, got {self.strictness_v}")
        if any(z not in (-1, 1) for _, z in self.sign_C):
            raise DomainError("sign observations must be -1 or +1")
        dims = {p.dim for p, _ in self.regular} | {p.dim for p in self.zero_start_A}
        dims |= {d.point.dim for d in self.saturation_B} | {d.point.dim for d, _ in self.sign_C}
        if len(dims) > 1:
            raise InputShapeError(f"inconsistent input dimensions {sorted(dims)}")

    @property
    def dim(self):
        for p, _ in self.regular:
            return p.dim
        for p in self.zero_start_A:
            return p.dim
        for d in self.saturation_B:
            return d.point.dim
        for d, _ in self.sign_C:
            return d.point.dim
        return 0

    @property
    def has_signs(self):
        return len(self.sign_C) > 0

    def without(self, keys) -> "ObservationSet":
        """Drop every regular and virtual row whose (location, time) key is in ``keys``."""
        keys = set(keys)
        return ObservationSet(
            regular=[(p, y) for p, y in self.regular if p.key not in keys],
            zero_start_A=[p for p in self.zero_start_A if p.key not in keys],
            saturation_B=[d for d in self.saturation_B if d.key not in keys],
            sign_C=[(d, z) for d, z in self.sign_C if d.key not in keys],
            strictness_v=self.strictness_v)

    def variant(self, with_derivatives: bool) -> "ObservationSet":
        """The same data with derivative observations (B and C) kept or removed."""
        if with_derivatives:
            return self
        return ObservationSet(regular=self.regular, zero_start_A=self.zero_start_A,
                              strictness_v=self.strictness_v)

    @cached_property
    def layout(self) -> "Layout":
        return Layout(self)


def _point_key(p: InputPoint):
    return (p.spatial_index, p.time_index, p.values)


class Layout:
    """
    Latent ordering and index maps for an ObservationSet.

    Latent vector: unique function points (regular and A) followed by unique
    derivative rows (B and C), each sorted location-major, time-minor.
    """

    def __init__(self, obs: ObservationSet):
        fkeys = {}
        for p, _ in obs.regular:
            fkeys.setdefault(_point_key(p), p)
        for p in obs.zero_start_A:
            fkeys.setdefault(_point_key(p), p)
        self.points = [fkeys[k] for k in sorted(fkeys)]
        f_index = {k: i for i, k in enumerate(sorted(fkeys))}

        dkeys = {}
        for d in obs.saturation_B:
            dkeys.setdefault((_point_key(d.point), d.wrt_dimension), d)
        for d, _ in obs.sign_C:
            dkeys.setdefault((_point_key(d.point), d.wrt_dimension), d)
        self.derivatives = [dkeys[k] for k in sorted(dkeys)]
        m = len(self.points)
        d_index = {k: m + i for i, k in enumerate(sorted(dkeys))}

        self.n_f = m
        self.n_d = len(self.derivatives)
        dim = obs.dim
        X = [p.values for p in self.points] + [d.point.values for d in self.derivatives]
        self.X = np.array(X, dtype=float).reshape(-1, dim) if X else np.zeros((0, dim))
        self.wrt = np.array([-1] * m + [d.wrt_dimension for d in self.derivatives], dtype=int)

        anchor_keys = {p.key for p in obs.zero_start_A}
        self.reg_latent = np.array([f_index[_point_key(p)] for p, _ in obs.regular], dtype=int)
        self.reg_y = np.array([y for _, y in obs.regular], dtype=float)
        self.reg_gauss = np.array([p.key not in anchor_keys for p, _ in obs.regular], dtype=bool)
        self.A_latent = np.array([f_index[_point_key(p)] for p in obs.zero_start_A], dtype=int)
        self.B_latent = np.array([d_index[(_point_key(d.point), d.wrt_dimension)]
                                  for d in obs.saturation_B], dtype=int)
        self.C_latent = np.array([d_index[(_point_key(d.point), d.wrt_dimension)]
                                  for d, _ in obs.sign_C], dtype=int)
        self.z = np.array([z for _, z in obs.sign_C], dtype=float)
        self.C_keys = [(d.point.spatial_index, d.point.time_index, d.wrt_dimension)
                       for d, _ in obs.sign_C]

        # Gaussian observation rows: noisy regular, then A anchors, then B anchors
        reg = self.reg_latent[self.reg_gauss]
        self.gauss_latent = np.concatenate([reg, self.A_latent, self.B_latent]).astype(int)
        self.gauss_y = np.concatenate([self.reg_y[self.reg_gauss],
                                       np.zeros(self.A_latent.size + self.B_latent.size)])
        self.gauss_is_noisy = np.zeros(self.gauss_latent.size, dtype=bool)
        self.gauss_is_noisy[:reg.size] = True

    @property
    def gauss_X(self):
        return self.X[self.gauss_latent]

    @property
    def gauss_wrt(self):
        return self.wrt[self.gauss_latent]

    def gauss_noise(self, sigma):
        return np.where(self.gauss_is_noisy, sigma ** 2, DIRAC_VARIANCE)

    def observation_rows(self, with_signs):
        """Gaussian observation rows, plus sign-point derivative rows if requested."""
        cache = self.__dict__.setdefault("_rows", {})
        if with_signs not in cache:
            X, wrt = self.gauss_X, self.gauss_wrt
            if with_signs and self.C_latent.size:
                X = np.vstack([X, self.X[self.C_latent]])
                wrt = np.concatenate([wrt, self.wrt[self.C_latent]])
            cache[with_signs] = (X, wrt, PairGeometry(X, wrt, X, wrt))
        return cache[with_signs]


@dataclass(frozen=True)
class PriorSpec:
    alpha_scale: float = 1.0
    sigma_scale: float = 1.0
    rho_shape: float = 1.0
    rho_rate: float = 0.1

    def __post_init__(self):
        if min(self.alpha_scale, self.sigma_scale, self.rho_shape, self.rho_rate) <= 0:
            raise DomainError(f"prior scales, shapes and rates must be positive: {self}")


# -- likelihood terms -----------------------------------------------------------------

def log_lik_gaussian(y, f, sigma) -> float:
    y = np.asarray(y, dtype=float)
    f = np.asarray(f, dtype=float)
    if y.shape != f.shape:
        raise InputShapeError(f"y and f shapes differ: {y.shape} vs {f.shape}")
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be positive")
    var = np.broadcast_to(sigma ** 2, y.shape)
    r = y - f
    return float(-0.5 * np.sum(LOG_2PI + np.log(var) + r * r / var))


def log_lik_sign(z, f_prime, v) -> float:
    """Sum of log Phi(z f' / v), stable far into the lower tail."""
    z = np.asarray(z, dtype=float)
    f_prime = np.asarray(f_prime, dtype=float)
    if z.shape != f_prime.shape:
        raise InputShapeError(f"z and f_prime shapes differ: {z.shape} vs {f_prime.shape}")
    if not v > 0:
        raise DomainError(f"strictness v must be positive, got {v}")
    return float(np.sum(log_ndtr(z * f_prime / v)))


def _log_half_normal(x, scale):
    return math.log(2.0) - 0.5 * LOG_2PI - math.log(scale) - 0.5 * (x / scale) ** 2


def _log_gamma(x, shape, rate):
    return shape * math.log(rate) - gammaln(shape) + (shape - 1.0) * math.log(x) - rate * x


def log_prior(hp: Hyperparameters, ps: PriorSpec = PriorSpec()) -> float:
    lp = _log_half_normal(hp.alpha, ps.alpha_scale) + _log_half_normal(hp.sigma, ps.sigma_scale)
    for rho in hp.lengthscales:
        lp += _log_gamma(rho, ps.rho_shape, ps.rho_rate)
    return float(lp)


def log_gp_prior(obs: ObservationSet, f, f_prime, hp: Hyperparameters) -> float:
    lay = obs.layout
    g = np.concatenate([np.asarray(f, float), np.asarray(f_prime, float)])
    jc = assemble_joint(lay.points, lay.derivatives, hp)
    a = solve_triangular(jc.chol, g, lower=True) if g.size else g
    return float(-0.5 * (g.size * LOG_2PI + a @ a) - np.sum(np.log(np.diag(jc.chol))))


def log_joint(obs: ObservationSet, f, f_prime, hp: Hyperparameters,
              ps: PriorSpec = PriorSpec()) -> float:
    """Unnormalized log posterior of (f, f', hyperparameters)."""
    lay = obs.layout
    f = np.asarray(f, dtype=float)
    f_prime = np.asarray(f_prime, dtype=float)
    if f.shape != (lay.n_f,) or f_prime.shape != (lay.n_d,):
        raise InputShapeError(f"expected f of length {lay.n_f} and f' of length {lay.n_d}, "
                              f"got {f.shape} and {f_prime.shape}")
    g = np.concatenate([f, f_prime])
    total = log_lik_gaussian(lay.reg_y[lay.reg_gauss], g[lay.reg_latent[lay.reg_gauss]], hp.sigma)
    anchors = np.concatenate([lay.A_latent, lay.B_latent]).astype(int)
    if anchors.size:
        total += log_lik_gaussian(np.zeros(anchors.size), g[anchors], math.sqrt(DIRAC_VARIANCE))
    if lay.C_latent.size:
        total += log_lik_sign(lay.z, g[lay.C_latent], obs.strictness_v)
    if g.size:
        total += log_gp_prior(obs, f, f_prime, hp)
    return total + log_prior(hp, ps)
