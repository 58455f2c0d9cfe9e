"""Command-line front end: ``rbmr {fit,baselines,simulate,benchmark}``.

Settings resolve in three layers: built-in defaults, then an optional JSON or
YAML ``--config`` file, then explicit flags. Every command writes a
``manifest.json`` next to its outputs recording the resolved settings and
their digest. Primary outputs depend only on inputs, settings and seed.

Exit codes: 0 success, 1 configuration error, 2 empty data, 3 numerical
failure. Errors are also reported as one JSON object on standard error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .baselines import ivw, mr_egger
from .exceptions import ConfigurationError, DomainError, RBMRError
from .ingest import ROLES, harmonize, load_summary_stats, read_blocks, select_instruments, write_dropped_report
from .ld import ld_from_reference, ld_prune, read_reference_panel
from .model import HyperParams
from .simulate import METHODS, SimConfig, run_benchmark, simulate_dataset, write_simulation
from .vbem import FitOptions, fit_with_inference

logger = logging.getLogger("rbmr")

THREADS_ENV = "RBMR_THREADS"
INPUT_KEYS = ("exposure", "outcome", "selection", "reference", "reference_snps", "blocks")

FIT_DEFAULTS = {
    "p_threshold": 1e-4,
    "lambda": 0.15,
    "alpha_w": 2.0,
    "beta_w": 2.0,
    "tol": 1e-7,
    "max_iter": 10000,
    "lrt": "marginal",
    "r2_threshold": 0.05,
    "seed": 0,
    "column_map": {},
}
SIM_DEFAULTS = {"profile": "desk", "replicate": 0, "replicates": 100, "methods": list(METHODS), "threads": 1}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form; insensitive to key order."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"{path}: cannot parse config ({exc})") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def _parse_column_map(items) -> dict:
    out = {}
    for item in items or []:
        role, sep, col = item.partition("=")
        if not sep or role not in ROLES:
            raise ConfigurationError(f"--column-map expects ROLE=COLUMN with ROLE in {ROLES}, got {item!r}")
        out[role] = col
    return out


def resolve(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    """Merge defaults < config file < explicit flags (``None`` flags are ignored)."""
    out = dict(defaults)
    out.update(file_cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2) + "\n", encoding="utf-8")


def write_tsv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, sep="\t", index=False, float_format="%.10g", lineterminator="\n")


def write_manifest(outdir: Path, command: str, config: dict, inputs: list, seed: int) -> dict:
    # the output location is not part of the configuration
    config = {k: v for k, v in config.items() if k != "out"}
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "config": config,
        "input_paths": [str(p) for p in inputs],
        "seed": int(seed),
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    write_json(manifest, outdir / "manifest.json")
    return manifest


def _outdir(cfg) -> Path:
    if not cfg.get("out"):
        raise ConfigurationError("--out is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepare(cfg):
    """Load, select and harmonize; returns (dataset, panel, meta, selection)."""
    missing = [k for k in INPUT_KEYS if not cfg.get(k)]
    if missing:
        raise ConfigurationError(f"missing input paths: {', '.join('--' + k.replace('_', '-') for k in missing)}")
    cmap = cfg.get("column_map") or {}
    if not isinstance(cmap, dict):
        raise ConfigurationError("column_map must be a mapping of role to column name")
    blocks = read_blocks(cfg["blocks"])
    G, meta = read_reference_panel(cfg["reference"], cfg["reference_snps"])
    exposure = load_summary_stats(cfg["exposure"], cmap, "exposure")
    outcome = load_summary_stats(cfg["outcome"], cmap, "outcome")
    selection = load_summary_stats(cfg["selection"], cmap, "selection")
    instruments = select_instruments(selection, float(cfg["p_threshold"]))
    data = harmonize(exposure, outcome, instruments, meta, blocks)
    return data, G, meta, selection


def cmd_fit(cfg) -> int:
    out = _outdir(cfg)
    try:
        hyper = HyperParams(float(cfg["alpha_w"]), float(cfg["beta_w"]))
        opts = FitOptions(max_iter=int(cfg["max_iter"]), elbo_rel_tol=float(cfg["tol"]), seed=int(cfg["seed"]), lrt=cfg["lrt"])
    except DomainError as exc:
        raise ConfigurationError(str(exc)) from None
    data, G, meta, _ = _prepare(cfg)
    write_dropped_report(data.dropped, out / "dropped_snps.tsv")
    ld = ld_from_reference(data, G, meta, float(cfg["lambda"]))
    res = fit_with_inference(data, ld, hyper, opts)
    write_json(res.to_dict(), out / "result.json")
    write_tsv(pd.DataFrame([res.tsv_row()]), out / "result.tsv")
    write_manifest(out, "fit", cfg, [cfg[k] for k in INPUT_KEYS], cfg["seed"])
    return 0


def run_baselines(data, G, meta, selection, r2_threshold) -> list[dict]:
    """Prune by ascending selection p-value on unshrunk LD, then IVW and Egger."""
    ld_raw = ld_from_reference(data, G, meta, 0.0)
    pvals = [selection[s].pvalue for s in data.snp_ids]
    kept = ld_prune(list(enumerate(pvals)), ld_raw, r2_threshold)
    pruned = data.subset(kept)
    rows = [ivw(pruned).to_dict()]
    try:
        rows.append(mr_egger(pruned).to_dict())
    except RBMRError as exc:
        logger.warning("MR-Egger skipped: %s", exc)
        nan = float("nan")
        rows.append(
            dict(method="egger", se=nan, pvalue=nan, n_snps=pruned.n_snps, intercept=nan, intercept_se=nan,
                 estimate=nan, ci_lower=nan, ci_upper=nan, note=f"skipped: {exc}")
        )
    return rows


def cmd_baselines(cfg) -> int:
    out = _outdir(cfg)
    data, G, meta, selection = _prepare(cfg)
    write_dropped_report(data.dropped, out / "dropped_snps.tsv")
    rows = run_baselines(data, G, meta, selection, float(cfg["r2_threshold"]))
    cols = ["method", "estimate", "se", "ci_lower", "ci_upper", "pvalue", "n_snps", "intercept", "intercept_se", "note"]
    frame = pd.DataFrame(rows)
    if "note" not in frame:
        frame["note"] = ""
    frame["note"] = frame["note"].fillna("")
    write_tsv(frame[cols], out / "baselines.tsv")
    write_json(rows, out / "baselines.json")
    write_manifest(out, "baselines", cfg, [cfg[k] for k in INPUT_KEYS], cfg["seed"])
    return 0


def _sim_config(cfg) -> SimConfig:
    fields = {k: cfg[k] for k in SimConfig.__dataclass_fields__ if k in cfg}
    profile = cfg.get("profile", "desk")
    if profile == "desk":
        return SimConfig.desk(**fields)
    if profile == "full":
        return SimConfig.from_dict(fields)
    raise ConfigurationError(f"unknown profile {profile!r}; use 'desk' or 'full'")


def _sim_resolved(file_cfg, flags):
    known = set(SimConfig.__dataclass_fields__) | set(SIM_DEFAULTS) | {"out", "alpha_w", "beta_w", "tol", "max_iter", "lrt"}
    unknown = set(file_cfg) - known
    if unknown:
        raise ConfigurationError(f"unknown settings: {sorted(unknown)}")
    cfg = resolve(SIM_DEFAULTS, file_cfg, flags)
    sim = _sim_config(cfg)
    cfg.update(sim.to_dict())
    return cfg, sim


def cmd_simulate(cfg, sim: SimConfig) -> int:
    out = _outdir(cfg)
    data = simulate_dataset(sim, int(cfg["replicate"]))
    paths = write_simulation(data, out)
    write_manifest(out, "simulate", cfg, [], sim.seed)
    logger.info("wrote %d files to %s", len(paths), out)
    return 0


def cmd_benchmark(cfg, sim: SimConfig) -> int:
    out = _outdir(cfg)
    methods = cfg["methods"]
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    cfg["methods"] = list(methods)
    try:
        hyper = HyperParams(float(cfg.get("alpha_w", 2.0)), float(cfg.get("beta_w", 2.0)))
        opts = FitOptions(max_iter=int(cfg.get("max_iter", 10000)), elbo_rel_tol=float(cfg.get("tol", 1e-7)),
                          lrt=cfg.get("lrt", "marginal"))
    except DomainError as exc:
        raise ConfigurationError(str(exc)) from None
    threads = int(cfg["threads"])
    metrics, raw = run_benchmark(sim, int(cfg["replicates"]), methods, hyper, opts, threads=threads)
    write_tsv(metrics, out / "metrics.tsv")
    write_tsv(raw, out / "replicates.tsv")
    # thread count does not change results, so it is left out of the digest
    recorded = {k: v for k, v in cfg.items() if k != "threads"}
    write_manifest(out, "benchmark", recorded, [], sim.seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rbmr", description="Robust Bayesian Mendelian randomization with correlated instruments.")
    p.add_argument("--version", action="version", version=f"rbmr {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON or YAML file with settings; flags override it")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)

    def inputs(sp):
        for k in INPUT_KEYS:
            sp.add_argument("--" + k.replace("_", "-"), dest=k)
        sp.add_argument("--p-threshold", type=float, help="selection p-value cutoff (default 1e-4)")
        sp.add_argument("--column-map", action="append", metavar="ROLE=COLUMN",
                        help="map a column role to a header name; repeatable")

    f = sub.add_parser("fit", help="fit the robust model on correlated instruments")
    common(f)
    inputs(f)
    f.add_argument("--lambda", dest="lambda_", type=float, help="LD shrinkage towards identity (default 0.15)")
    f.add_argument("--alpha-w", type=float)
    f.add_argument("--beta-w", type=float)
    f.add_argument("--tol", type=float, help="relative ELBO tolerance")
    f.add_argument("--max-iter", type=int)
    f.add_argument("--lrt", choices=("marginal", "elbo"))

    b = sub.add_parser("baselines", help="IVW and MR-Egger on LD-pruned instruments")
    common(b)
    inputs(b)
    b.add_argument("--r2-threshold", type=float, help="pruning threshold on r^2 (default 0.05)")

    s = sub.add_parser("simulate", help="write one simulated dataset")
    common(s)
    s.add_argument("--profile", choices=("desk", "full"))
    s.add_argument("--replicate", type=int)

    m = sub.add_parser("benchmark", help="Monte-Carlo comparison of the estimators")
    common(m)
    m.add_argument("--profile", choices=("desk", "full"))
    m.add_argument("--replicates", type=int)
    m.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    m.add_argument("--beta0", type=float)
    m.add_argument("--threads", type=int, default=None,
                   help=f"worker processes (default from ${THREADS_ENV}, else 1)")
    m.add_argument("--lrt", choices=("marginal", "elbo"))
    return p


def _dispatch(argv) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    file_cfg = load_config(args.config)
    if args.command in ("fit", "baselines"):
        flags["column_map"] = _parse_column_map(flags.pop("column_map", None)) or None
        if "lambda_" in flags:
            flags["lambda"] = flags.pop("lambda_")
        unknown = set(file_cfg) - set(FIT_DEFAULTS) - set(INPUT_KEYS) - {"out"}
        if unknown:
            raise ConfigurationError(f"unknown settings: {sorted(unknown)}")
        cfg = resolve(FIT_DEFAULTS, file_cfg, flags)
        return cmd_fit(cfg) if args.command == "fit" else cmd_baselines(cfg)
    if args.command == "benchmark" and flags.get("threads") is None and "threads" not in file_cfg:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                flags["threads"] = int(env)
            except ValueError:
                raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    cfg, sim = _sim_resolved(file_cfg, flags)
    return cmd_simulate(cfg, sim) if args.command == "simulate" else cmd_benchmark(cfg, sim)


def main(argv=None) -> int:
    try:
        return _dispatch(argv)
    except RBMRError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
