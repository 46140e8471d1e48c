"""
Dataset ingestion, input standardization, virtual observations and synthetic data.

CSV schema (header must match exactly)::

    location_id,sx,sy,h,s,i,t,y

Every location must carry the same ordered set of time points, including t=0,
and a single value of each spatial feature.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .kernel import TIME_DIM, DerivativeSpec, Hyperparameters, InputPoint
from .kernel import kronecker_cov
from .model import DEFAULT_STRICTNESS, ObservationSet

COLUMNS = ("location_id", "sx", "sy", "h", "s", "i", "t", "y")
FEATURES = ("h", "s", "i", "sx", "sy")

# standardized summary statistics of the reference survey (13 locations)
REFERENCE_MEANS = {"h": 5.255, "s": 9.704, "i": 5.155, "sx": 3.549, "sy": 4.969}
REFERENCE_STDS = {"h": 1.0, "s": 1.0, "i": 1.0, "sx": 0.732, "sy": 0.674}


@dataclass
class RawDataset:
    location_id: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    h: np.ndarray
    s: np.ndarray
    i: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        for name in COLUMNS:
            arr = np.asarray(getattr(self, name))
            setattr(self, name, arr if name == "location_id" else arr.astype(float))
        self.location_id = np.asarray([str(v) for v in self.location_id])
        validate(self)

    def __len__(self):
        return self.y.size

    @property
    def locations(self):
        """Location ids in order of first appearance."""
        _, first = np.unique(self.location_id, return_index=True)
        return list(self.location_id[np.sort(first)])

    @property
    def times(self):
        return np.unique(self.t)

    def write_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(COLUMNS)
            for k in range(len(self)):
                writer.writerow([self.location_id[k]] + [repr(float(getattr(self, c)[k]))
                                                         for c in COLUMNS[1:]])


def validate(raw: RawDataset):
    n = raw.y.size
    for name in COLUMNS:
        if np.asarray(getattr(raw, name)).shape != (n,):
            raise DataError(f"column {name!r} has the wrong length")
    for name in COLUMNS[1:]:
        if not np.all(np.isfinite(getattr(raw, name))):
            raise DataError(f"column {name!r} contains non-finite values")
    seen = set()
    for loc, t in zip(raw.location_id, raw.t):
        if (loc, t) in seen:
            raise DataError(f"duplicate (location, t) key: location {loc}, t={t:g}")
        seen.add((loc, t))
    times = None
    for loc in dict.fromkeys(raw.location_id):
        mask = raw.location_id == loc
        loc_times = np.sort(raw.t[mask])
        if not np.any(loc_times == 0):
            raise DataError(f"location {loc} has no t=0 observation")
        if times is None:
            times = loc_times
        elif loc_times.shape != times.shape or not np.array_equal(loc_times, times):
            raise DataError(f"location {loc} is missing time points (has {loc_times.tolist()}, "
                            f"expected {times.tolist()})")
        for name in FEATURES:
            if np.ptp(getattr(raw, name)[mask]) > 0:
                raise DataError(f"feature {name!r} varies across rows of location {loc}")


def ingest(path, format="csv") -> RawDataset:
    """Read and validate a dataset file."""
    if format != "csv":
        raise DataError(f"unsupported format {format!r}; only csv is supported")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if tuple(header) != COLUMNS:
            raise DataError(f"header must be {','.join(COLUMNS)}; got {','.join(header)}")
        cols = {c: [] for c in COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(COLUMNS):
                raise DataError(f"line {lineno}: expected {len(COLUMNS)} fields, got {len(row)}")
            cols["location_id"].append(row[0].strip())
            for c, cell in zip(COLUMNS[1:], row[1:]):
                try:
                    cols[c].append(float(cell))
                except ValueError:
                    raise DataError(f"line {lineno}: non-numeric value {cell!r} in column {c}") \
                        from None
    return RawDataset(**{c: np.array(v) for c, v in cols.items()})


# -- standardization ---------------------------------------------------------------------

@dataclass
class StandardizedDataset:
    """
    Inputs divided by per-feature standard deviations; t and y are left as is.

    ``X`` columns follow kernel order [h, s, i, sx, sy, t]; rows are sorted
    location-major, time-minor.
    """

    X: np.ndarray
    y: np.ndarray
    spatial_index: np.ndarray
    time_index: np.ndarray
    location_ids: list
    times: np.ndarray
    scales: dict

    @property
    def n_locations(self):
        return len(self.location_ids)

    @property
    def n_times(self):
        return self.times.size

    def points(self):
        return [InputPoint(self.X[k], int(self.spatial_index[k]), int(self.time_index[k]))
                for k in range(self.y.size)]

    def spatial_inputs(self):
        """One row of standardized spatial features per location."""
        return self.X[self.time_index == 0][:, :TIME_DIM]

    def transform(self, h, s, i, sx, sy, t):
        """Apply the stored factors to raw-unit inputs."""
        sc = self.scales
        return np.column_stack([np.asarray(h, float) / sc["h"], np.asarray(s, float) / sc["s"],
                                np.asarray(i, float) / sc["i"], np.asarray(sx, float) / sc["sxy"],
                                np.asarray(sy, float) / sc["sxy"], np.asarray(t, float)])

    def destandardize(self, X=None):
        """Raw-unit inputs [h, s, i, sx, sy, t] from standardized ones."""
        X = self.X if X is None else np.asarray(X, float)
        sc = self.scales
        factors = np.array([sc["h"], sc["s"], sc["i"], sc["sxy"], sc["sxy"], 1.0])
        return X * factors


def _per_location(raw: RawDataset, name):
    locs = raw.locations
    col = getattr(raw, name)
    return np.array([col[raw.location_id == loc][0] for loc in locs])


def standardize(raw: RawDataset) -> StandardizedDataset:
    """
    Divide H, S and I by their own standard deviations and Sx, Sy by their common one.

    Standard deviations are sample (ddof=1) values over locations.  The common
    standard deviation of Sx and Sy is that of both coordinate columns pooled
    into one sample, which keeps their relative spread unequal.
    """
    scales = {}
    for name in ("h", "s", "i"):
        vals = _per_location(raw, name)
        sd = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        if not sd > 0:
            raise DataError(f"column {name!r} has zero variance and cannot be standardized")
        scales[name] = sd
    pooled = np.concatenate([_per_location(raw, "sx"), _per_location(raw, "sy")])
    sd = float(np.std(pooled, ddof=1)) if pooled.size > 2 else 0.0
    if not sd > 0:
        raise DataError("spatial coordinates have zero variance and cannot be standardized")
    scales["sxy"] = sd

    locs = raw.locations
    loc_index = {loc: k for k, loc in enumerate(locs)}
    times = raw.times
    t_index = {t: k for k, t in enumerate(times)}
    sidx = np.array([loc_index[l] for l in raw.location_id])
    tidx = np.array([t_index[t] for t in raw.t])
    order = np.lexsort((tidx, sidx))

    out = StandardizedDataset(X=np.empty((0, 6)), y=raw.y[order].copy(), spatial_index=sidx[order],
                              time_index=tidx[order], location_ids=locs, times=times,
                              scales=scales)
    out.X = out.transform(raw.h[order], raw.s[order], raw.i[order], raw.sx[order],
                          raw.sy[order], raw.t[order])
    return out


# -- virtual observations ------------------------------------------------------------------

@dataclass
class VirtualConfig:
    zero_start: bool = True
    sign_times: tuple = (6, 9)
    saturation: bool = False
    strictness_v: float = DEFAULT_STRICTNESS
    derivatives: bool = True
    max_sign_times: int = 4


def build_virtual_sets(ds: StandardizedDataset, config: VirtualConfig = VirtualConfig()
                       ) -> ObservationSet:
    """
    Attach virtual observations to the regular rows of ``ds``.

    A: zero function value at every t-index 0 point.  C: positive time-derivative
    sign at the configured time indices.  B: zero time-derivative at the final
    time index (off unless ``saturation``).  ``derivatives=False`` drops B and C.
    """
    n_t = ds.n_times
    sign_times = tuple(int(t) for t in config.sign_times) if config.derivatives else ()
    for t in sign_times:
        if not 0 <= t < n_t:
            raise ConfigError(f"sign time index {t} is not in the dataset (0..{n_t - 1})")
    if len(sign_times) > config.max_sign_times:
        warnings.warn(f"{len(sign_times)} sign time points per location: many derivative "
                      "sign observations tend to over-smooth the posterior", stacklevel=2)
    points = ds.points()
    regular = [(p, float(y)) for p, y in zip(points, ds.y)]
    A = [p for p in points if p.time_index == 0] if config.zero_start else []
    C = [(DerivativeSpec(p, TIME_DIM), 1) for p in points if p.time_index in sign_times]
    B = []
    if config.saturation and config.derivatives:
        B = [DerivativeSpec(p, TIME_DIM) for p in points if p.time_index == n_t - 1]
    return ObservationSet(regular=regular, zero_start_A=A, saturation_B=B, sign_C=C,
                          strictness_v=config.strictness_v)


# -- synthetic data ----------------------------------------------------------------------

@dataclass
class SimulationConfig:
    n_locations: int = 13
    n_times: int = 11
    noise_sigma: float = 0.37
    amplitude: float = 6.0
    amplitude_sd: float = 0.5
    decay_rate: float = 0.12
    decay_sd: float = 0.3
    # lengthscales of the spatial modulation over (h, s, i, sx/sy) in standardized units
    spatial_lengthscales: tuple = (1.0, 18.0, 1.3, 4.5)
    raw_scales: dict = field(default_factory=lambda: {"h": 12.0, "s": 2.5, "i": 9.0,
                                                      "sxy": 120.0})

    def __post_init__(self):
        if self.n_locations < 2 or self.n_times < 2:
            raise ConfigError("simulation needs at least 2 locations and 2 time points")
        if self.noise_sigma < 0 or self.amplitude <= 0 or self.decay_rate <= 0:
            raise ConfigError("noise_sigma must be >= 0 and amplitude, decay_rate > 0")
        if len(self.spatial_lengthscales) != 4:
            raise ConfigError("spatial_lengthscales needs 4 entries (h, s, i, sx/sy)")


def _spatial_features(n, rng):
    """Standardized features [h, s, i, sx, sy] resembling the reference survey."""
    cols = []
    for name in FEATURES:
        cols.append(rng.normal(REFERENCE_MEANS[name], REFERENCE_STDS[name], size=n))
    F = np.column_stack(cols)
    # rescale so the sample statistics are exactly those of standardized data
    for k in range(3):
        F[:, k] = F[:, k] / np.std(F[:, k], ddof=1)
    F[:, 3:5] /= np.std(F[:, 3:5].ravel(), ddof=1)
    return F


def _spatial_gp(F, lengthscales, sd, rng):
    if sd == 0:
        return np.zeros(F.shape[0])
    rho = np.asarray(lengthscales, float)[[0, 1, 2, 3, 3]]
    diff = (F[:, None, :] - F[None, :, :]) / rho
    K = sd ** 2 * np.exp(-0.5 * np.sum(diff * diff, axis=-1)) + 1e-10 * np.eye(F.shape[0])
    return np.linalg.cholesky(K) @ rng.standard_normal(F.shape[0])


def _to_raw(F, times, values, scales, ids=None):
    n, n_t = F.shape[0], times.size
    ids = np.array([f"L{k + 1:02d}" for k in range(n)]) if ids is None else ids
    rep = np.repeat(np.arange(n), n_t)
    return RawDataset(location_id=ids[rep],
                      sx=F[rep, 3] * scales["sxy"], sy=F[rep, 4] * scales["sxy"],
                      h=F[rep, 0] * scales["h"], s=F[rep, 1] * scales["s"],
                      i=F[rep, 2] * scales["i"], t=np.tile(times, n), y=values.ravel())


def simulate(config: SimulationConfig = SimulationConfig(), seed: int = 0) -> RawDataset:
    """
    Monotone, saturating fading curves with noise.

    Location i follows amplitude_i * (1 - exp(-rate_i * t)), a cumulative sum
    of non-negative increments starting at 0.  Log-amplitude and log-rate vary
    over the spatial features as independent GP draws.
    """
    rng = np.random.default_rng(seed)
    F = _spatial_features(config.n_locations, rng)
    log_amp = math.log(config.amplitude) + _spatial_gp(F, config.spatial_lengthscales,
                                                       config.amplitude_sd, rng)
    log_rate = math.log(config.decay_rate) + _spatial_gp(F, config.spatial_lengthscales,
                                                         config.decay_sd, rng)
    times = np.arange(config.n_times, dtype=float)
    curves = np.exp(log_amp)[:, None] * -np.expm1(-np.exp(log_rate)[:, None] * times[None, :])
    y = curves + config.noise_sigma * rng.standard_normal(curves.shape)
    return _to_raw(F, times, y, config.raw_scales)


def simulate_curves(config: SimulationConfig = SimulationConfig(), seed: int = 0):
    """Noise-free curves matching :func:`simulate` for the same seed (locations x times)."""
    cfg = SimulationConfig(**{**config.__dict__, "noise_sigma": 0.0})
    raw = simulate(cfg, seed)
    return raw.y.reshape(config.n_locations, config.n_times)


def simulate_gp(n_locations: int, n_times: int, hp: Hyperparameters, seed: int = 0,
                raw_scales=None) -> RawDataset:
    """
    Draw y = f + noise from the GP prior itself on a location x time grid.

    Spatial features are generated so that standardizing the returned raw
    dataset recovers exactly the inputs the draw was made on.
    """
    if hp.dim != 6:
        raise ConfigError("simulate_gp expects the 6-dimensional [h, s, i, sx, sy, t] layout")
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((n_locations, 5))
    for k in range(3):
        F[:, k] /= np.std(F[:, k], ddof=1)
    F[:, 3:5] /= np.std(F[:, 3:5].ravel(), ddof=1)
    times = np.arange(n_times, dtype=float)
    K = kronecker_cov(F, times, hp)
    L = np.linalg.cholesky(K + 1e-9 * np.eye(K.shape[0]))
    f = L @ rng.standard_normal(K.shape[0])
    y = f + hp.sigma * rng.standard_normal(f.size)
    scales = raw_scales or SimulationConfig().raw_scales
    return _to_raw(F, times, y.reshape(n_locations, n_times), scales)


def is_nondecreasing(series, tol=0.0):
    """Row-wise check that every step of each series is >= -tol."""
    series = np.atleast_2d(np.asarray(series, float))
    return np.all(np.diff(series, axis=1) >= -tol, axis=1)
