"""INI run configuration for the command-line tool."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SimulationConfig, VirtualConfig
from .errors import ConfigError
from .evaluation import CvConfig, CvScheme
from .inference import SamplerConfig
from .kernel import DEFAULT_GROUPS
from .model import PriorSpec

SECTIONS = ("data", "model", "inference", "cv", "simulate", "predict")


def _ints(text):
    text = str(text).strip()
    return tuple(int(t) for t in text.replace(",", " ").split()) if text else ()


def _floats(text):
    return tuple(float(t) for t in str(text).replace(",", " ").split())


def _bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


_MODEL_KEYS = {
    "zero_start": _bool, "sign_times": _ints, "saturation": _bool, "strictness_v": float,
    "derivatives": _bool, "max_sign_times": int, "alpha_prior": float, "sigma_prior": float,
    "rho_shape": float, "rho_rate": float, "groups": _ints,
}
_INFERENCE_KEYS = {
    "chains": int, "warmup": int, "draws": int, "thin": int, "seed": int, "target_accept": float,
    "init_jitter": float, "ess_steps": int, "interweave": _bool, "centered": _bool,
    "optimize_init": _bool, "rhat_threshold": float,
}
_CV_KEYS = {
    "scheme": str, "tail_length": int, "refit": str, "max_draws": int, "variant": str,
    "chains": int, "warmup": int, "draws": int, "thin": int, "seed": int,
}
_SIM_KEYS = {
    "n_locations": int, "n_times": int, "noise_sigma": float, "amplitude": float,
    "amplitude_sd": float, "decay_rate": float, "decay_sd": float,
    "spatial_lengthscales": _floats, "seed": int,
}
_PREDICT_KEYS = {"max_draws": int, "seed": int}


@dataclass
class RunConfig:
    dataset: Path | None = None
    virtual: VirtualConfig = field(default_factory=VirtualConfig)
    prior: PriorSpec = field(default_factory=PriorSpec)
    groups: tuple = DEFAULT_GROUPS
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    rhat_threshold: float = 1.05
    scheme: CvScheme = field(default_factory=lambda: CvScheme("cv2"))
    cv: CvConfig = field(default_factory=CvConfig)
    variant: str = "both"
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    simulation_seed: int = 0
    predict_draws: int = 500
    predict_seed: int = 0
    source: Path | None = None

    def snapshot(self) -> dict:
        """Plain-data view of every setting, for manifests."""
        return {
            "dataset": None if self.dataset is None else str(self.dataset),
            "virtual": asdict(self.virtual), "prior": asdict(self.prior),
            "groups": list(self.groups), "sampler": asdict(self.sampler),
            "rhat_threshold": self.rhat_threshold,
            "scheme": {"kind": self.scheme.kind, "tail_length": self.scheme.tail_length},
            "cv": {"refit": self.cv.refit, "max_draws": self.cv.max_draws, "seed": self.cv.seed,
                   "sampler": asdict(self.cv.sampler)},
            "variant": self.variant,
            "simulation": {k: v for k, v in asdict(self.simulation).items()},
            "simulation_seed": self.simulation_seed,
            "predict": {"max_draws": self.predict_draws, "seed": self.predict_seed},
        }


def _section(parser, name, spec):
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in spec:
            raise ConfigError(f"unknown key {key!r} in section [{name}]; "
                              f"allowed: {', '.join(sorted(spec))}")
        try:
            out[key] = spec[key](raw)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key} = {raw!r}: {exc}") from None
    return out


def load_config(path=None) -> RunConfig:
    """
    Read an INI file.  Every key is optional; unknown sections or keys are errors.

    A relative ``[data] path`` is resolved against the directory of the file.
    """
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]; allowed: {', '.join(SECTIONS)}")
    cfg.source = path

    data = _section(parser, "data", {"path": str})
    if "path" in data:
        p = Path(data["path"])
        cfg.dataset = p if p.is_absolute() else path.parent / p

    model = _section(parser, "model", _MODEL_KEYS)
    vkeys = {f.name for f in fields(VirtualConfig)}
    cfg.virtual = replace(cfg.virtual, **{k: v for k, v in model.items() if k in vkeys})
    cfg.prior = PriorSpec(alpha_scale=model.get("alpha_prior", 1.0),
                          sigma_scale=model.get("sigma_prior", 1.0),
                          rho_shape=model.get("rho_shape", 1.0),
                          rho_rate=model.get("rho_rate", 0.1))
    if "groups" in model:
        cfg.groups = model["groups"]

    inf = _section(parser, "inference", _INFERENCE_KEYS)
    cfg.rhat_threshold = inf.pop("rhat_threshold", cfg.rhat_threshold)
    cfg.sampler = replace(cfg.sampler, **inf)

    cv = _section(parser, "cv", _CV_KEYS)
    cfg.scheme = CvScheme(cv.pop("scheme", "cv2"), cv.pop("tail_length", 7))
    cfg.variant = cv.pop("variant", cfg.variant)
    fold_sampler = replace(cfg.cv.sampler, **{k: cv.pop(k) for k in ("chains", "warmup", "draws", "thin")
                                              if k in cv})
    cfg.cv = CvConfig(sampler=fold_sampler, prior=cfg.prior, **cv)

    sim = _section(parser, "simulate", _SIM_KEYS)
    cfg.simulation_seed = sim.pop("seed", 0)
    cfg.simulation = SimulationConfig(**sim)

    pred = _section(parser, "predict", _PREDICT_KEYS)
    cfg.predict_draws = pred.get("max_draws", cfg.predict_draws)
    cfg.predict_seed = pred.get("seed", cfg.predict_seed)
    return cfg
