"""
Cross-validation schemes and predictive scores.

Three schemes are supported:

* ``cv1``  leave one observation out (anchored t=0 rows are not candidates)
* ``cv2``  leave one location out, every time point of the location
* ``cv3``  leave the last ``tail_length`` time points of one location out

Held-out keys lose all their rows, virtual ones included.  Each fold either
refits the hyperparameters on the training remainder or re-conditions the
full-data posterior draws on it (see :class:`CvConfig`).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigError, SchemeError
from .inference import PosteriorSamples, SamplerConfig, predict, sample_hyperparameters
from .model import ObservationSet, PriorSpec

SCHEMES = ("cv1", "cv2", "cv3")
VARIANTS = ("with_derivatives", "without_derivatives")
REFIT_POLICIES = ("auto", "always", "never")


@dataclass(frozen=True)
class CvScheme:
    kind: str
    tail_length: int = 7

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.kind!r}; expected one of {SCHEMES}")
        object.__setattr__(self, "kind", kind)
        if kind == "cv3" and self.tail_length < 1:
            raise ConfigError("tail_length must be at least 1")

    def folds(self, obs: ObservationSet) -> list:
        """Held-out key sets, one per fold, in location-major order."""
        keys = sorted({p.key for p, _ in obs.regular})
        if not keys:
            raise SchemeError("no regular observations to hold out")
        if self.kind == "cv1":
            anchored = {p.key for p in obs.zero_start_A}
            return [Fold(f"obs_{si}_{ti}", frozenset([(si, ti)]))
                    for si, ti in keys if (si, ti) not in anchored]
        locations = sorted({si for si, _ in keys})
        if self.kind == "cv2":
            return [Fold(f"loc_{si}", frozenset(k for k in keys if k[0] == si))
                    for si in locations]
        n_times = len({ti for _, ti in keys})
        if self.tail_length >= n_times:
            raise ConfigError(f"tail_length {self.tail_length} must be smaller than the number "
                              f"of time points ({n_times})")
        first = n_times - self.tail_length
        return [Fold(f"tail_{si}", frozenset(k for k in keys if k[0] == si and k[1] >= first))
                for si in locations]

    def describe(self):
        if self.kind == "cv1":
            return "leave one observation out; anchored t-index 0 rows are not held out"
        if self.kind == "cv2":
            return "leave one location out; all time points of the location are held out"
        return (f"leave the last {self.tail_length} time points of one location out "
                "(time indices T-tail_length .. T-1)")


@dataclass(frozen=True)
class Fold:
    name: str
    keys: frozenset


@dataclass
class CvConfig:
    """
    Settings for a cross-validation run.

    refit: ``always`` fits every fold from scratch; ``never`` re-conditions
    the full-data hyperparameter draws on each training remainder; ``auto``
    re-conditions for cv1 and refits for cv2 and cv3.
    """

    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(warmup=500, draws=500, thin=1))
    prior: PriorSpec = field(default_factory=PriorSpec)
    refit: str = "auto"
    max_draws: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.refit not in REFIT_POLICIES:
            raise ConfigError(f"refit must be one of {REFIT_POLICIES}, got {self.refit!r}")
        if self.max_draws is not None and self.max_draws < 1:
            raise ConfigError("max_draws must be at least 1 so predictive draws exist")

    def refits(self, scheme: CvScheme):
        if self.refit == "auto":
            return scheme.kind != "cv1"
        return self.refit == "always"


@dataclass
class EvalReport:
    scheme: str
    variant: str
    elpd: float
    mse: float
    loo_pit: list
    folds: list
    pointwise: list
    metadata: dict = field(default_factory=dict)

    @property
    def elpd_sum(self):
        """Mean over folds of the summed held-out log density."""
        return float(np.mean([f["elpd_sum"] for f in self.folds]))

    def series(self):
        """Predicted mean time series per fold: {fold: (time_index, mean)} sorted by time."""
        out = {}
        for rec in self.pointwise:
            out.setdefault((rec["fold"], rec["spatial_index"]), []).append(
                (rec["time_index"], rec["mean"]))
        return {k: tuple(np.array(v) for v in zip(*sorted(pairs))) for k, pairs in out.items()}

    def to_dict(self):
        return {"scheme": self.scheme, "variant": self.variant, "elpd": self.elpd,
                "elpd_sum": self.elpd_sum, "mse": self.mse, "loo_pit": list(self.loo_pit),
                "folds": self.folds, "pointwise": self.pointwise, "metadata": self.metadata}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    def write_json(self, path):
        Path(path).write_text(self.to_json())

    def write_csv(self, path):
        """Per-fold statistics as a flat table."""
        cols = ["fold", "n_heldout", "n_train", "elpd", "elpd_sum", "mse", "refit"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for f in self.folds:
                w.writerow([_fmt(f[c]) for c in cols])

    @classmethod
    def from_dict(cls, d):
        return cls(scheme=d["scheme"], variant=d["variant"], elpd=d["elpd"], mse=d["mse"],
                   loo_pit=list(d.get("loo_pit", [])), folds=list(d["folds"]),
                   pointwise=list(d["pointwise"]), metadata=dict(d.get("metadata", {})))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _variant_obs(obs: ObservationSet, variant: str):
    if variant not in VARIANTS:
        raise ConfigError(f"model variant must be one of {VARIANTS}, got {variant!r}")
    return obs.variant(variant == "with_derivatives")


def _fold_seed(seed, k):
    return int(np.random.SeedSequence([int(seed), k]).generate_state(1)[0])


def run_cv(obs: ObservationSet, scheme: CvScheme, model_variant: str = "with_derivatives",
           config: CvConfig = None, full_samples: PosteriorSamples = None) -> EvalReport:
    """
    Cross-validate one model variant.

    ELPD per fold is the mean held-out log predictive density, each density a
    mixture of per-draw Gaussians; the reported ELPD and MSE average the
    fold values.  ``full_samples`` (a fit on the full variant data) is reused
    by re-conditioning folds instead of fitting it here.
    """
    config = config or CvConfig()
    data = _variant_obs(obs, model_variant)
    folds = scheme.folds(data)
    refit = config.refits(scheme)
    if not refit and full_samples is None:
        full_samples = sample_hyperparameters(data, config.prior,
                                              replace(config.sampler, seed=config.seed))
    fold_rows, pointwise, pits = [], [], []
    for k, fold in enumerate(folds):
        train = data.without(fold.keys)
        if not train.regular:
            raise SchemeError(f"fold {fold.name} leaves no regular observations for training")
        test = [(p, y) for p, y in data.regular if p.key in fold.keys]
        seed = _fold_seed(config.seed, k)
        if refit:
            samples = sample_hyperparameters(train, config.prior,
                                             replace(config.sampler, seed=seed))
        else:
            samples = full_samples
        pred = predict(samples, train, [p for p, _ in test], include_noise=True,
                       max_draws=config.max_draws, seed=seed)
        y = np.array([v for _, v in test])
        logd = pred.log_density(y)
        pit = pred.pit(y)
        sq = (y - pred.mean) ** 2
        fold_rows.append({"fold": fold.name, "n_heldout": len(test), "n_train": len(train.regular),
                          "elpd": float(np.mean(logd)), "elpd_sum": float(np.sum(logd)),
                          "mse": float(np.mean(sq)), "refit": bool(refit)})
        for j, (p, yv) in enumerate(test):
            pointwise.append({"fold": fold.name, "spatial_index": p.spatial_index,
                              "time_index": p.time_index, "y": float(yv),
                              "mean": float(pred.mean[j]), "lower95": float(pred.lower95[j]),
                              "upper95": float(pred.upper95[j]), "log_density": float(logd[j]),
                              "pit": float(pit[j])})
        if scheme.kind == "cv1":
            pits.extend(float(v) for v in pit)
    meta = {"description": scheme.describe(), "tail_length": scheme.tail_length,
            "n_folds": len(folds), "refit": refit, "max_draws": config.max_draws,
            "seed": config.seed, "sampler": asdict(config.sampler),
            "elpd_definition": "mean over folds of the mean held-out log density"}
    return EvalReport(scheme=scheme.kind, variant=model_variant,
                      elpd=float(np.mean([f["elpd"] for f in fold_rows])),
                      mse=float(np.mean([f["mse"] for f in fold_rows])),
                      loo_pit=pits, folds=fold_rows, pointwise=pointwise, metadata=meta)


def loo_pit(obs: ObservationSet, config: CvConfig = None, full_samples=None) -> list:
    """LOO-PIT values: per held-out observation, the fraction of predictive draws <= y."""
    return run_cv(obs, CvScheme("cv1"), "with_derivatives", config, full_samples).loo_pit


def compare_variants(obs: ObservationSet, scheme: CvScheme, config: CvConfig = None) -> dict:
    """Both model variants on identical folds and seeds."""
    return {v: run_cv(obs, scheme, v, config) for v in VARIANTS}


def comparison_table(reports: dict) -> list:
    """Rows (scheme, statistic, with, without) in the layout of a two-model score table."""
    rows = []
    by_scheme = {}
    for (scheme, variant), rep in reports.items():
        by_scheme.setdefault(scheme, {})[variant] = rep
    for scheme in sorted(by_scheme):
        pair = by_scheme[scheme]
        for stat in ("elpd", "elpd_sum", "mse"):
            rows.append({"scheme": scheme, "statistic": stat,
                         **{v: getattr(pair[v], stat) for v in VARIANTS if v in pair}})
    return rows


def pit_histogram(pit, bins=10):
    """Bin edges and counts of PIT values on [0, 1]."""
    pit = np.asarray(pit, float)
    if pit.size and (pit.min() < 0 or pit.max() > 1):
        raise ConfigError("PIT values must lie in [0, 1]")
    counts, edges = np.histogram(pit, bins=bins, range=(0.0, 1.0))
    return edges, counts


def ks_uniform(pit):
    """Kolmogorov-Smirnov distance of a sample to Uniform(0, 1)."""
    pit = np.asarray(pit, float)
    if pit.size == 0:
        raise ConfigError("no PIT values")
    return float(stats.kstest(pit, "uniform").statistic)


def ks_critical(n, level=0.05):
    """Critical value of the one-sample KS statistic at the given level."""
    return float(stats.kstwo.ppf(1.0 - level, n))
