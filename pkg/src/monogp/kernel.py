"""
Exponentiated-quadratic ARD covariance with derivative cross-covariances.

Every covariance row is described by an input vector ``x`` and an integer
``wrt``: ``wrt == -1`` stands for the function value f(x), ``wrt == g >= 0``
for the partial derivative df/dx_g.  Row order is whatever the caller passes;
the data layer uses (location-major, time-minor) throughout.

Notation:
    alpha => prior standard deviation of the latent process,
    rho   => lengthscales, one per group; ``groups`` maps each input
             dimension to its group (Sx and Sy share one by default),
    sigma => observation noise standard deviation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from .errors import ConditioningError, DomainError, InputShapeError

# default input order: five spatial features, then time
INPUT_NAMES = ("h", "s", "i", "sx", "sy", "t")
TIME_DIM = 5
DEFAULT_GROUPS = (0, 1, 2, 3, 3, 4)

JITTER_START = 1e-8
JITTER_MAX = 1e-4


@dataclass(frozen=True)
class InputPoint:
    values: tuple
    spatial_index: int = 0
    time_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @property
    def key(self):
        return (self.spatial_index, self.time_index)

    @property
    def dim(self):
        return len(self.values)


@dataclass(frozen=True)
class DerivativeSpec:
    point: InputPoint
    wrt_dimension: int = TIME_DIM

    @property
    def key(self):
        return self.point.key


@dataclass(frozen=True)
class Hyperparameters:
    alpha: float
    lengthscales: tuple
    sigma: float
    groups: tuple = DEFAULT_GROUPS

    def __post_init__(self):
        object.__setattr__(self, "lengthscales",
                           tuple(float(r) for r in np.atleast_1d(self.lengthscales)))
        object.__setattr__(self, "groups", tuple(int(g) for g in self.groups))
        if not (self.alpha > 0 and self.sigma > 0 and all(r > 0 for r in self.lengthscales)):
            raise DomainError(f"hyperparameters must be strictly positive: {self}")
        if sorted(set(self.groups)) != list(range(len(self.lengthscales))):
            raise DomainError(f"groups={self.groups} must use each of the "
                              f"{len(self.lengthscales)} lengthscales at least once")

    @property
    def dim(self):
        return len(self.groups)

    @property
    def rho(self):
        """Per-dimension lengthscale vector of length D."""
        return np.asarray(self.lengthscales)[list(self.groups)]

    def as_vector(self):
        return np.array([self.alpha, *self.lengthscales, self.sigma])

    @classmethod
    def from_vector(cls, vec, groups=DEFAULT_GROUPS):
        vec = np.asarray(vec, dtype=float)
        return cls(alpha=vec[0], lengthscales=tuple(vec[1:-1]), sigma=vec[-1], groups=groups)

    @staticmethod
    def names(n_groups):
        return ["alpha"] + [f"rho_{g + 1}" for g in range(n_groups)] + ["sigma"]

    @classmethod
    def isotropic(cls, alpha, rho, sigma, dim=None, groups=None):
        """Equal lengthscales; ``groups`` defaults to one group per dimension."""
        if groups is None:
            groups = tuple(range(dim)) if dim is not None else DEFAULT_GROUPS
        n = max(groups) + 1
        return cls(alpha, (rho,) * n, sigma, tuple(groups))


def _as_values(x, hp):
    values = np.asarray(x.values if isinstance(x, InputPoint) else x, dtype=float)
    if values.shape != (hp.dim,):
        raise InputShapeError(f"expected an input of dimension {hp.dim}, got shape {values.shape}")
    return values


def _check_dim(g, hp):
    if not 0 <= g < hp.dim:
        raise InputShapeError(f"derivative dimension {g} outside 0..{hp.dim - 1}")


# -- scalar covariances ---------------------------------------------------------------

def se_ard_cov(x1, x2, hp: Hyperparameters) -> float:
    """alpha^2 exp(-1/2 sum_d (x1_d - x2_d)^2 / rho_d^2)."""
    a, b = _as_values(x1, hp), _as_values(x2, hp)
    r2 = 0.0
    for d, rho in enumerate(hp.rho):
        r2 += ((a[d] - b[d]) / rho) ** 2
    return hp.alpha ** 2 * math.exp(-0.5 * r2)


def cov_deriv_value(d1: DerivativeSpec, x2, hp: Hyperparameters) -> float:
    """Cov[df(x1)/dx1_g, f(x2)]."""
    g = d1.wrt_dimension
    _check_dim(g, hp)
    a, b = _as_values(d1.point, hp), _as_values(x2, hp)
    rho_g = hp.rho[g]
    return se_ard_cov(a, b, hp) * (-(a[g] - b[g]) / rho_g ** 2)


def cov_deriv_deriv(d1: DerivativeSpec, d2: DerivativeSpec, hp: Hyperparameters) -> float:
    """Cov[df(x1)/dx1_g, df(x2)/dx2_h]."""
    g, h = d1.wrt_dimension, d2.wrt_dimension
    _check_dim(g, hp)
    _check_dim(h, hp)
    a, b = _as_values(d1.point, hp), _as_values(d2.point, hp)
    rho = hp.rho
    delta = 1.0 if g == h else 0.0
    return (se_ard_cov(a, b, hp) / rho[g] ** 2
            * (delta - (a[h] - b[h]) * (a[g] - b[g]) / rho[h] ** 2))


# -- matrix covariances -----------------------------------------------------------

class PairGeometry:
    """
    Hyperparameter-independent pieces of a cross-covariance between two row sets.

    Building this once and calling :meth:`cov` per hyperparameter value avoids
    recomputing pairwise differences inside samplers.

    Parameters
    ----------
    X1, X2 : array_like, shape (n1, D) and (n2, D)
    wrt1, wrt2 : array_like of int, shape (n1,) and (n2,)
        -1 for a function value, otherwise the differentiated input dimension.
    """

    def __init__(self, X1, wrt1, X2, wrt2):
        X1 = np.atleast_2d(np.asarray(X1, dtype=float))
        X2 = np.atleast_2d(np.asarray(X2, dtype=float))
        wrt1 = np.asarray(wrt1, dtype=int).reshape(-1)
        wrt2 = np.asarray(wrt2, dtype=int).reshape(-1)
        # an empty side takes its width from the other
        if X1.size == 0:
            X1 = np.zeros((0, X2.shape[1]))
        if X2.size == 0:
            X2 = np.zeros((0, X1.shape[1]))
        if X1.shape[1] != X2.shape[1]:
            raise InputShapeError(f"row sets differ in dimension: {X1.shape} vs {X2.shape}")
        if wrt1.size != X1.shape[0] or wrt2.size != X2.shape[0]:
            raise InputShapeError("wrt arrays must match the number of rows")
        D = X1.shape[1]
        if np.any(wrt1 >= D) or np.any(wrt2 >= D):
            raise InputShapeError("derivative dimension out of range")
        self.shape = (X1.shape[0], X2.shape[0])
        self.dim = D
        diff = X1[:, None, :] - X2[None, :, :]
        self.sq = (diff * diff).reshape(self.shape[0] * self.shape[1], D)

        d1 = wrt1 >= 0
        d2 = wrt2 >= 0
        self.has_derivatives = bool(d1.any() or d2.any())
        if not self.has_derivatives:
            return
        i1 = np.flatnonzero(d1)
        i2 = np.flatnonzero(d2)
        n1, n2 = self.shape
        f2 = np.flatnonzero(~d2)
        f1 = np.flatnonzero(~d1)
        # derivative row vs function column: factor -delta_g / rho_g^2
        r, c = np.meshgrid(i1, f2, indexing="ij")
        self.row_idx = (r * n2 + c).ravel()
        self.row_g = np.broadcast_to(wrt1[i1][:, None], r.shape).ravel()
        self.row_delta = diff[r, c, wrt1[i1][:, None]].ravel()
        # function row vs derivative column: factor +delta_h / rho_h^2
        r, c = np.meshgrid(f1, i2, indexing="ij")
        self.col_idx = (r * n2 + c).ravel()
        self.col_h = np.broadcast_to(wrt2[i2][None, :], r.shape).ravel()
        self.col_delta = diff[r, c, wrt2[i2][None, :]].ravel()
        # derivative vs derivative: (delta_gh - delta_g delta_h / rho_h^2) / rho_g^2
        r, c = np.meshgrid(i1, i2, indexing="ij")
        g = np.broadcast_to(wrt1[i1][:, None], r.shape)
        h = np.broadcast_to(wrt2[i2][None, :], r.shape)
        self.both_idx = (r * n2 + c).ravel()
        self.both_g = g.ravel()
        self.both_h = h.ravel()
        self.both_same = (g == h).ravel().astype(float)
        self.both_dg = diff[r, c, g].ravel()
        self.both_dh = diff[r, c, h].ravel()

    def cov(self, hp: Hyperparameters) -> np.ndarray:
        if hp.dim != self.dim:
            raise InputShapeError(f"inputs have {self.dim} columns, hyperparameters expect {hp.dim}")
        inv = hp.rho ** -2.0
        K = hp.alpha ** 2 * np.exp(-0.5 * (self.sq @ inv))
        if self.has_derivatives:
            K[self.row_idx] *= -self.row_delta * inv[self.row_g]
            K[self.col_idx] *= self.col_delta * inv[self.col_h]
            K[self.both_idx] *= inv[self.both_g] * (self.both_same
                                                    - self.both_dg * self.both_dh * inv[self.both_h])
        return K.reshape(self.shape)


def cross_cov(X1, wrt1, X2, wrt2, hp: Hyperparameters) -> np.ndarray:
    """
    Covariance matrix between two row sets.

    Parameters
    ----------
    X1, X2 : array_like, shape (n1, D) and (n2, D)
    wrt1, wrt2 : array_like of int, shape (n1,) and (n2,)
        -1 for a function value, otherwise the differentiated input dimension.
    """
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X1.shape[1] != hp.dim or X2.shape[1] != hp.dim:
        raise InputShapeError(f"inputs must have {hp.dim} columns, got {X1.shape} and {X2.shape}")
    return PairGeometry(X1, wrt1, X2, wrt2).cov(hp)


def kronecker_cov(spatial_inputs, temporal_inputs, hp: Hyperparameters) -> np.ndarray:
    """
    K_S kron K_T over a full location x time grid.

    The spatial block takes the first D_S dimensions of ``hp`` and carries the
    whole scale alpha; the temporal block uses the remaining dimensions with
    unit scale.  Rows are ordered (i, t) with t varying fastest.
    """
    XS = np.asarray(spatial_inputs, dtype=float)
    XT = np.asarray(temporal_inputs, dtype=float)
    if XS.ndim == 1:
        XS = XS[:, None]
    if XT.ndim == 1:
        XT = XT[:, None]
    if XS.shape[0] == 0 or XT.shape[0] == 0:
        raise DomainError("kronecker_cov needs at least one location and one time point")
    ds, dt = XS.shape[1], XT.shape[1]
    if ds + dt != hp.dim:
        raise InputShapeError(f"spatial ({ds}) + temporal ({dt}) dims must equal {hp.dim}")
    rho = hp.rho

    def se(X, r, scale):
        diff = (X[:, None, :] - X[None, :, :]) / r
        return scale ** 2 * np.exp(-0.5 * np.sum(diff * diff, axis=-1))

    KS = se(XS, rho[:ds], hp.alpha)
    KT = se(XT, rho[ds:], 1.0)
    return np.kron(KS, KT)


def grid_inputs(spatial_inputs, temporal_inputs):
    """Rows of X = X_S (x) X_T in (location-major, time-minor) order."""
    XS = np.atleast_2d(np.asarray(spatial_inputs, dtype=float))
    XT = np.asarray(temporal_inputs, dtype=float)
    XT = XT[:, None] if XT.ndim == 1 else XT
    n, t = XS.shape[0], XT.shape[0]
    return np.hstack([np.repeat(XS, t, axis=0), np.tile(XT, (n, 1))])


# -- Cholesky with jitter escalation ----------------------------------------------------

def jitter_cholesky(A, jitter=JITTER_START, max_jitter=JITTER_MAX):
    """
    Lower Cholesky factor of ``A + jitter * I``.

    The jitter grows tenfold after each failure until ``max_jitter``.
    Returns ``(L, jitter_used)``.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0)), jitter
    if not np.all(np.isfinite(A)):
        raise ConditioningError("covariance contains non-finite entries", jitter)
    eye = np.eye(n)
    current = jitter
    while True:
        try:
            return cholesky(A + current * eye, lower=True, check_finite=False), current
        except LinAlgError:
            if current >= max_jitter * (1 - 1e-9):
                raise ConditioningError("Cholesky factorization failed", current) from None
            current = min(current * 10.0, max_jitter)


# -- joint block covariance ---------------------------------------------------------------

@dataclass
class JointCovariance:
    """Block covariance over [f at ``points``; f' at ``derivatives``]."""

    K_ff: np.ndarray
    K_ffp: np.ndarray
    K_fpf: np.ndarray
    K_fpfp: np.ndarray
    points: list = field(default_factory=list)
    derivatives: list = field(default_factory=list)
    jitter: float = 0.0
    chol: np.ndarray | None = None

    def full(self):
        return np.block([[self.K_ff, self.K_ffp], [self.K_fpf, self.K_fpfp]])

    @property
    def labels(self):
        """One (kind, spatial_index, time_index, wrt) tuple per row of ``full()``."""
        out = [("f", p.spatial_index, p.time_index, -1) for p in self.points]
        out += [("df", d.point.spatial_index, d.point.time_index, d.wrt_dimension)
                for d in self.derivatives]
        return out


def rows_from(points: Sequence[InputPoint] = (), derivatives: Sequence[DerivativeSpec] = ()):
    """Stack points and derivative specs into ``(X, wrt)`` arrays."""
    vals = [p.values for p in points] + [d.point.values for d in derivatives]
    wrt = [-1] * len(points) + [d.wrt_dimension for d in derivatives]
    if not vals:
        return np.zeros((0, 0)), np.zeros(0, dtype=int)
    return np.array(vals, dtype=float), np.array(wrt, dtype=int)


def assemble_joint(train_points: Sequence[InputPoint], deriv_points: Sequence[DerivativeSpec],
                   hp: Hyperparameters, jitter: float = JITTER_START) -> JointCovariance:
    """Fill all four blocks, add jitter to the diagonal and verify a Cholesky exists."""
    train_points, deriv_points = list(train_points), list(deriv_points)
    n, m = len(train_points), len(deriv_points)
    if n + m == 0:
        raise DomainError("assemble_joint needs at least one point")
    X, wrt = rows_from(train_points, deriv_points)
    K = cross_cov(X, wrt, X, wrt, hp)
    K = 0.5 * (K + K.T)
    L, used = jitter_cholesky(K, jitter)
    K[np.diag_indices_from(K)] += used
    return JointCovariance(K_ff=K[:n, :n], K_ffp=K[:n, n:], K_fpf=K[n:, :n], K_fpfp=K[n:, n:],
                           points=train_points, derivatives=deriv_points, jitter=used, chol=L)
