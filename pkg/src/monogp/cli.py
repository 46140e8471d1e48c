"""
Command-line front end.

    monogp simulate --config run.ini --out sim/
    monogp fit      --config run.ini --out fit/
    monogp predict  --archive fit/ --query query.csv --out pred/
    monogp cv       --config run.ini --scheme cv2 --variant both --out cv/
    monogp diagnose --archive fit/

Exit codes: 0 success, 2 configuration error, 3 data or missing-file error,
4 numerical failure, 5 convergence failure (any split-Rhat above threshold).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import (StandardizedDataset, build_virtual_sets, ingest, simulate, standardize)
from .errors import (ConditioningError, ConfigError, ConvergenceError, DataError, DiagnosticError,
                     DomainError, InitializationError, InputShapeError, SchemeError)
from .evaluation import (VARIANTS, CvScheme, EvalReport, comparison_table, ks_critical,
                         ks_uniform, pit_histogram, run_cv)
from .inference import (PosteriorSamples, effective_sample_size, predict,
                        sample_hyperparameters, split_rhat)
from .kernel import TIME_DIM

log = logging.getLogger("monogp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CONVERGENCE = 0, 2, 3, 4, 5
VARIANT_FLAGS = {"deriv": "with_derivatives", "noderiv": "without_derivatives"}
QUERY_COLUMNS = ("sx", "sy", "h", "s", "i", "t")


# -- file output -----------------------------------------------------------------------

def atomic_write(path, data):
    """Write bytes or text to ``path`` through a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _json_text(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=_to_plain) + "\n"


def _to_plain(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Output directory bookkeeping: files written and the run manifest."""

    def __init__(self, command, out, config: RunConfig, seed, inputs=()):
        self.command = command
        self.out = Path(out)
        self.config = config
        self.seed = seed
        self.inputs = [Path(p) for p in inputs if p is not None]
        self.outputs = []
        self.start = time.perf_counter()
        self.out.mkdir(parents=True, exist_ok=True)

    def write(self, name, data):
        atomic_write(self.out / name, data)
        self.outputs.append(name)

    def finish(self, status="ok", extra=None):
        manifest = {
            "command": self.command, "status": status, "seed": self.seed,
            "tool_version": __version__, "config": self.config.snapshot(),
            "config_file": None if self.config.source is None else str(self.config.source),
            "inputs": {str(p): _sha256(p) for p in self.inputs if p.exists()},
            "outputs": sorted(set(self.outputs)),
            "runtime_seconds": round(time.perf_counter() - self.start, 3),
        }
        if extra:
            manifest.update(extra)
        previous = self.out / "manifest.json"
        if previous.exists():
            # one manifest per directory: earlier runs are kept as history
            try:
                old = json.loads(previous.read_text())
            except ValueError:
                old = {}
            history = old.pop("history", [])
            if old:
                history.append(old)
            kept = {o for h in history for o in h.get("outputs", [])
                    if (self.out / o).exists()}
            manifest["outputs"] = sorted(kept | set(manifest["outputs"]))
            manifest["history"] = history
        atomic_write(self.out / "manifest.json", _json_text(manifest))


# -- helpers ----------------------------------------------------------------------------

def _variant(flag, allow_both=False):
    if flag == "both":
        if not allow_both:
            raise ConfigError("--variant both is only valid for the cv command")
        return list(VARIANTS)
    if flag not in VARIANT_FLAGS:
        raise ConfigError(f"unknown variant {flag!r}")
    return [VARIANT_FLAGS[flag]]


def _apply_overrides(cfg: RunConfig, args):
    sampler = cfg.sampler
    for key in ("chains", "draws", "warmup", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            sampler = replace(sampler, **{key: value})
    cfg.sampler = sampler
    if getattr(args, "seed", None) is not None:
        cfg.cv = replace(cfg.cv, seed=args.seed)
        cfg.simulation_seed = args.seed
        cfg.predict_seed = args.seed
    fold = cfg.cv.sampler
    for key in ("chains", "draws", "warmup"):
        value = getattr(args, key, None)
        if value is not None:
            fold = replace(fold, **{key: value})
    cfg.cv = replace(cfg.cv, sampler=fold)
    if getattr(args, "scheme", None):
        cfg.scheme = CvScheme(args.scheme, cfg.scheme.tail_length)
    return cfg


def _load_dataset(cfg: RunConfig):
    if cfg.dataset is None:
        raise ConfigError("no dataset: set [data] path in the config file")
    return standardize(ingest(cfg.dataset))


def _observations(ds: StandardizedDataset, cfg: RunConfig, variant):
    virtual = replace(cfg.virtual, derivatives=cfg.virtual.derivatives
                      and variant == "with_derivatives")
    return build_virtual_sets(ds, virtual)


def histogram_mode(x):
    """Centre of the tallest Freedman-Diaconis histogram bin."""
    x = np.asarray(x, float)
    if np.ptp(x) == 0:
        return float(x[0])
    edges = np.histogram_bin_edges(x, bins="fd")
    counts, edges = np.histogram(x, bins=edges)
    k = int(np.argmax(counts))
    return float(0.5 * (edges[k] + edges[k + 1]))


def summary_rows(samples: PosteriorSamples):
    rhat = split_rhat(samples.params)
    ess = effective_sample_size(samples.params)
    flat = samples.params.reshape(-1, samples.params.shape[-1])
    rows = []
    for k, name in enumerate(samples.names):
        x = flat[:, k]
        rows.append([name, float(np.mean(x)), float(np.std(x, ddof=1)), histogram_mode(x),
                     float(np.quantile(x, 0.05)), float(np.quantile(x, 0.95)),
                     float(rhat[k]), float(ess[k])])
    return rows


SUMMARY_HEADER = ["parameter", "mean", "sd", "mode", "q5", "q95", "rhat", "ess"]


# -- archive ----------------------------------------------------------------------------

def save_archive(run: Run, samples: PosteriorSamples, ds: StandardizedDataset, cfg, variant):
    arrays = {
        "params": samples.params, "log_target": samples.log_target,
        "accept_rate": samples.accept_rate, "X": ds.X, "y": ds.y,
        "spatial_index": ds.spatial_index, "time_index": ds.time_index, "times": ds.times,
    }
    if samples.sign_latents is not None:
        arrays["sign_latents"] = samples.sign_latents
        arrays["sign_keys"] = np.array(samples.sign_keys, dtype=int).reshape(-1, 3)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    run.write("posterior.npz", buf.getvalue())
    meta = {"names": samples.names, "groups": list(samples.groups),
            "warmup_count": samples.warmup_count, "seed": samples.seed, "variant": variant,
            "location_ids": list(ds.location_ids), "scales": ds.scales,
            "virtual": asdict(_virtual_for(cfg, variant)), "prior": asdict(cfg.prior)}
    run.write("model.json", _json_text(meta))


def _virtual_for(cfg, variant):
    return replace(cfg.virtual, derivatives=cfg.virtual.derivatives
                   and variant == "with_derivatives")


def load_archive(path):
    """Posterior samples, standardized dataset, observation set and metadata of a fit."""
    from .data import VirtualConfig
    from .model import PriorSpec

    path = Path(path)
    npz, meta_file = path / "posterior.npz", path / "model.json"
    if not npz.exists() or not meta_file.exists():
        raise FileNotFoundError(f"{path} is not a model archive (posterior.npz / model.json "
                                "missing); run `monogp fit` first")
    meta = json.loads(meta_file.read_text())
    with np.load(npz) as z:
        arrays = {k: z[k] for k in z.files}
    ds = StandardizedDataset(X=arrays["X"], y=arrays["y"], spatial_index=arrays["spatial_index"],
                             time_index=arrays["time_index"], location_ids=meta["location_ids"],
                             times=arrays["times"], scales=meta["scales"])
    virtual = VirtualConfig(**{**meta["virtual"], "sign_times": tuple(meta["virtual"]
                                                                      ["sign_times"])})
    obs = build_virtual_sets(ds, virtual)
    keys = [tuple(int(v) for v in k) for k in arrays.get("sign_keys", np.zeros((0, 3)))]
    samples = PosteriorSamples(params=arrays["params"], names=meta["names"],
                               groups=tuple(meta["groups"]), warmup_count=meta["warmup_count"],
                               seed=meta["seed"], sign_latents=arrays.get("sign_latents"),
                               sign_keys=keys, log_target=arrays["log_target"],
                               accept_rate=arrays["accept_rate"])
    meta["prior"] = PriorSpec(**meta["prior"])
    return samples, ds, obs, meta


# -- commands ---------------------------------------------------------------------------

def cmd_simulate(args):
    cfg = _apply_overrides(load_config(args.config), args)
    raw = simulate(cfg.simulation, cfg.simulation_seed)
    run = Run("simulate", args.out, cfg, cfg.simulation_seed, [args.config])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["location_id", "sx", "sy", "h", "s", "i", "t", "y"])
    for k in range(len(raw)):
        w.writerow([raw.location_id[k]] + [repr(float(getattr(raw, c)[k]))
                                           for c in ("sx", "sy", "h", "s", "i", "t", "y")])
    run.write("dataset.csv", buf.getvalue())
    run.finish()
    print(f"wrote {len(raw)} rows to {run.out / 'dataset.csv'}")
    return EXIT_OK


def cmd_fit(args):
    cfg = _apply_overrides(load_config(args.config), args)
    variant = _variant(args.variant)[0]
    ds = _load_dataset(cfg)
    obs = _observations(ds, cfg, variant)
    run = Run("fit", args.out, cfg, cfg.sampler.seed, [args.config, cfg.dataset])
    samples = sample_hyperparameters(obs, cfg.prior, cfg.sampler, groups=cfg.groups)
    save_archive(run, samples, ds, cfg, variant)
    rows = summary_rows(samples)
    run.write("summary.csv", _csv_text(SUMMARY_HEADER, rows))
    run.write("diagnostics.csv", _csv_text(["parameter", "rhat", "ess"],
                                           [[r[0], r[6], r[7]] for r in rows]))
    _print_table(SUMMARY_HEADER, rows)
    worst = max(r[6] for r in rows)
    converged = worst < cfg.rhat_threshold
    run.finish("ok" if converged else "not_converged",
               {"variant": variant, "max_rhat": worst})
    if not converged:
        raise ConvergenceError(f"max split-Rhat {worst:.3f} >= {cfg.rhat_threshold}; "
                               "diagnostics written, consider longer chains")
    return EXIT_OK


def _read_query(path, ds: StandardizedDataset):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"query file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty; it needs at least a header") from None
        body = [r for r in reader if r and any(c.strip() for c in r)]
    extra = [h for h in header if h not in QUERY_COLUMNS + ("derivative", "location_id")]
    missing = [c for c in QUERY_COLUMNS if c not in header]
    if missing or extra:
        raise InputShapeError(f"query columns must be {','.join(QUERY_COLUMNS)} plus optional "
                              f"derivative/location_id; missing {missing}, unexpected {extra}")
    idx = {h: k for k, h in enumerate(header)}
    raw = np.empty((len(body), len(QUERY_COLUMNS)))
    deriv = np.zeros(len(body), dtype=bool)
    for r, row in enumerate(body):
        if len(row) != len(header):
            raise InputShapeError(f"query row {r + 2} has {len(row)} fields, expected "
                                  f"{len(header)}")
        try:
            raw[r] = [float(row[idx[c]]) for c in QUERY_COLUMNS]
            if "derivative" in idx:
                deriv[r] = str(row[idx["derivative"]]).strip().lower() in ("1", "true", "yes")
        except ValueError as exc:
            raise DataError(f"query row {r + 2}: {exc}") from None
    X = ds.transform(raw[:, 2], raw[:, 3], raw[:, 4], raw[:, 0], raw[:, 1], raw[:, 5])
    return header, body, X, deriv


def cmd_predict(args):
    samples, ds, obs, meta = load_archive(args.archive)
    cfg = _apply_overrides(load_config(args.config), args)
    header, body, X, deriv = _read_query(args.query, ds)
    run = Run("predict", args.out, cfg, cfg.predict_seed,
              [args.config, args.query, Path(args.archive) / "posterior.npz"])
    out_header = header + ["mean", "lower95", "upper95"]
    rows = []
    if len(body):
        wrt = np.where(deriv, TIME_DIM, -1)
        pred = predict(samples, obs, (X, wrt), include_noise=True,
                       max_draws=cfg.predict_draws, seed=cfg.predict_seed)
        rows = [row + [float(pred.mean[k]), float(pred.lower95[k]), float(pred.upper95[k])]
                for k, row in enumerate(body)]
    run.write("predictions.csv", _csv_text(out_header, rows))
    run.finish(extra={"archive": str(args.archive), "n_queries": len(body)})
    print(f"wrote {len(rows)} predictions to {run.out / 'predictions.csv'}")
    return EXIT_OK


def cmd_cv(args):
    cfg = _apply_overrides(load_config(args.config), args)
    variants = _variant(args.variant or _flag(cfg.variant), allow_both=True)
    full = None
    inputs = [args.config]
    if args.archive:
        full, ds, archived_obs, meta = load_archive(args.archive)
        inputs.append(Path(args.archive) / "posterior.npz")
        out = Path(args.out) if args.out else Path(args.archive) / "cv"
    else:
        ds = _load_dataset(cfg)
        inputs.append(cfg.dataset)
        meta = None
        if not args.out:
            raise ConfigError("--out is required unless --archive is given")
        out = Path(args.out)
    run = Run("cv", out, cfg, cfg.cv.seed, inputs)
    reports = {}
    for v in variants:
        obs = archived_obs if meta is not None else _observations(ds, cfg, "with_derivatives")
        reuse = full if meta is not None and meta["variant"] == v else None
        rep = run_cv(obs, cfg.scheme, v, cfg.cv, full_samples=reuse)
        reports[(cfg.scheme.kind, v)] = rep
        stem = f"{cfg.scheme.kind}_{v}"
        run.write(f"{stem}.json", rep.to_json() + "\n")
        cols = ["fold", "n_heldout", "n_train", "elpd", "elpd_sum", "mse", "refit"]
        run.write(f"{stem}_folds.csv", _csv_text(cols, [[f[c] for c in cols] for f in rep.folds]))
        pcols = ["fold", "spatial_index", "time_index", "y", "mean", "lower95", "upper95",
                 "log_density", "pit"]
        run.write(f"{stem}_pointwise.csv",
                  _csv_text(pcols, [[p[c] for c in pcols] for p in rep.pointwise]))
        print(f"{cfg.scheme.kind} {v}: ELPD {rep.elpd:.4f}  MSE {rep.mse:.4f}  "
              f"({len(rep.folds)} folds)")
    if len(variants) == 2:
        table = comparison_table(reports)
        run.write("comparison.csv", _csv_text(["scheme", "statistic", *VARIANTS],
                                              [[r["scheme"], r["statistic"],
                                                *[r[v] for v in VARIANTS]] for r in table]))
    run.finish(extra={"scheme": cfg.scheme.kind, "variants": variants})
    return EXIT_OK


def _flag(variant):
    return {"with_derivatives": "deriv", "without_derivatives": "noderiv"}.get(variant, variant)


def cmd_diagnose(args):
    samples, ds, obs, meta = load_archive(args.archive)
    cfg = load_config(args.config)
    cv_dir = Path(args.archive) / "cv"
    reports = sorted(cv_dir.glob("cv1_*.json")) if cv_dir.exists() else []
    reports = [p for p in reports if not p.name.endswith("manifest.json")]
    if not reports:
        raise FileNotFoundError(f"no CV1 results under {cv_dir}; run "
                                f"`monogp cv --scheme cv1 --archive {args.archive}` first")
    out = Path(args.out) if args.out else Path(args.archive) / "diagnostics"
    run = Run("diagnose", out, cfg, samples.seed, [p for p in reports])
    rows = summary_rows(samples)
    run.write("convergence.csv", _csv_text(["parameter", "rhat", "ess"],
                                           [[r[0], r[6], r[7]] for r in rows]))
    pit_rows, hist_rows, ks = [], [], {}
    for path in reports:
        rep = EvalReport.from_dict(json.loads(path.read_text()))
        pit = [p["pit"] for p in rep.pointwise]
        for p in rep.pointwise:
            pit_rows.append([rep.variant, p["spatial_index"], p["time_index"], p["pit"]])
        edges, counts = pit_histogram(pit, bins=args.bins)
        for k, c in enumerate(counts):
            hist_rows.append([rep.variant, float(edges[k]), float(edges[k + 1]), int(c)])
        ks[rep.variant] = {"ks_distance": ks_uniform(pit), "ks_critical_5pct": ks_critical(len(pit)),
                           "n": len(pit)}
    run.write("loo_pit.csv", _csv_text(["variant", "spatial_index", "time_index", "pit"],
                                       pit_rows))
    run.write("pit_histogram.csv", _csv_text(["variant", "bin_lo", "bin_hi", "count"], hist_rows))
    run.write("pit_uniformity.json", _json_text(ks))
    run.finish(extra={"archive": str(args.archive)})
    for variant, s in ks.items():
        print(f"{variant}: LOO-PIT KS distance {s['ks_distance']:.3f} "
              f"(5% critical {s['ks_critical_5pct']:.3f}, n={s['n']})")
    return EXIT_OK


def _print_table(header, rows):
    print("  ".join(f"{h:>10}" for h in header))
    for r in rows:
        print("  ".join(f"{r[0]:>10}" if k == 0 else f"{v:10.4g}" for k, v in enumerate(r)))


# -- entry point --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="monogp",
                                description="Constrained spatio-temporal GP regression.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="INI configuration file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)

    def sampler_flags(sp):
        sp.add_argument("--chains", type=int)
        sp.add_argument("--draws", type=int)
        sp.add_argument("--warmup", type=int)

    sp = sub.add_parser("simulate", help="write a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_simulate, out_required=True)

    sp = sub.add_parser("fit", help="sample the posterior and write a model archive")
    common(sp, config_required=True)
    sampler_flags(sp)
    sp.add_argument("--variant", choices=["deriv", "noderiv"], default="deriv")
    sp.set_defaults(func=cmd_fit, out_required=True)

    sp = sub.add_parser("predict", help="predict at query inputs from a model archive")
    common(sp)
    sp.add_argument("--archive", required=True)
    sp.add_argument("--query", required=True)
    sp.set_defaults(func=cmd_predict, out_required=True)

    sp = sub.add_parser("cv", help="cross-validate one or both model variants")
    common(sp)
    sampler_flags(sp)
    sp.add_argument("--scheme", choices=["cv1", "cv2", "cv3"])
    sp.add_argument("--variant", choices=["deriv", "noderiv", "both"])
    sp.add_argument("--archive", help="reuse the posterior of this fit for re-conditioned folds; "
                                      "results go to ARCHIVE/cv unless --out is given")
    sp.set_defaults(func=cmd_cv, out_required=False)

    sp = sub.add_parser("diagnose", help="LOO-PIT tables and convergence diagnostics")
    common(sp)
    sp.add_argument("--archive", required=True)
    sp.add_argument("--bins", type=int, default=10)
    sp.set_defaults(func=cmd_diagnose, out_required=False)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out_required and not args.out:
        parser.error(f"{args.command} needs --out")
    try:
        return args.func(args)
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ConfigError, SchemeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DataError, InputShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConditioningError, InitializationError, DiagnosticError, DomainError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
