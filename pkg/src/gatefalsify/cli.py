"""Command-line front end.

    gatefalsify simulate --config run.toml --out data/
    gatefalsify estimate --data data/ --out est/
    gatefalsify falsify  --estimates est/est.json --rct est/rct.json --alpha 0.05
    gatefalsify combine  --estimates est/est.json --report est/falsify.json
    gatefalsify bench    --config run.toml --out bench/

Flags override config values.  Exit codes: 0 success, 2 bad config or
data, 3 estimation failure; failures print a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from .bench import (
    ExperimentSpec,
    estimate_all,
    fixed_params,
    replication_seed,
    run_experiment,
    simulate_replication,
    write_outputs,
)
from .combine import METHODS, combine_all, write_intervals
from .data import Schema, load_dataset, save_dataset
from .errors import ConfigError, GateError, ParseError, SupportError
from .estimators import GateEstimate, dump_estimates, estimates_from_json
from .falsify import FalsificationReport, falsify
from .nuisance import NuisanceConfig
from .simgen import (
    CovariateBase,
    DgpConfig,
    load_covariate_base,
    synthetic_ihdp_covariates,
    true_gate,
)

EXIT_CONFIG = 2
EXIT_ESTIMATION = 3
MODES = ("simulate", "estimate", "falsify", "combine", "bench")

_TOP_KEYS = {"seed", "alpha", "out", "threads", "fast", "dgp", "bench", "covariates"}
_DGP_KEYS = {"K", "r", "m_c", "m_b", "c_z", "omega"}
_BENCH_KEYS = {"sweep", "values", "replications", "methods", "fix_params", "n_oracle"}
_COV_KEYS = {"path", "columns", "male", "smoked", "worked", "group_rule"}


@dataclass
class RunConfig:
    mode: str
    seed: int = 0
    alpha: float = 0.05
    out: Path = Path("out")
    threads: int = 1
    fast: bool = False
    dgp: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    covariates: dict = field(default_factory=dict)

    def dgp_config(self) -> DgpConfig:
        kw = dict(self.dgp)
        if "c_z" in kw:
            kw["c_z"] = tuple(int(c) for c in kw["c_z"])
        return DgpConfig(seed=self.seed, alpha=self.alpha, **kw)

    def experiment(self) -> ExperimentSpec:
        kw = dict(self.bench)
        if "values" in kw:
            kw["values"] = tuple(tuple(v) if isinstance(v, list) else v for v in kw["values"])
        if "methods" in kw:
            kw["methods"] = tuple(kw["methods"])
        return ExperimentSpec(base=self.dgp_config(), fast=self.fast, **kw)

    def covariate_base(self) -> CovariateBase:
        cov = dict(self.covariates)
        path = cov.pop("path", None)
        if not path:
            return synthetic_ihdp_covariates(seed=self.seed)
        if "group_rule" in cov:
            cov["group_rule"] = tuple(tuple(r) for r in cov["group_rule"])
        return load_covariate_base(path, **cov)


def _check_keys(table: dict, allowed: set, where: str) -> None:
    extra = set(table) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    _check_keys(raw, _TOP_KEYS, "config")
    _check_keys(raw.get("dgp", {}), _DGP_KEYS, "[dgp]")
    _check_keys(raw.get("bench", {}), _BENCH_KEYS, "[bench]")
    _check_keys(raw.get("covariates", {}), _COV_KEYS, "[covariates]")
    return raw


def build_run_config(args: argparse.Namespace) -> RunConfig:
    raw = load_config(args.config) if args.config else {}
    cfg = RunConfig(
        mode=args.mode,
        seed=int(raw.get("seed", 0)),
        alpha=float(raw.get("alpha", 0.05)),
        out=Path(raw.get("out", "out")),
        threads=int(raw.get("threads", 1)),
        fast=bool(raw.get("fast", False)),
        dgp=dict(raw.get("dgp", {})),
        bench=dict(raw.get("bench", {})),
        covariates=dict(raw.get("covariates", {})),
    )
    overrides = {k: getattr(args, k) for k in ("seed", "alpha", "threads") if getattr(args, k) is not None}
    if args.out is not None:
        overrides["out"] = Path(args.out)
    if args.fast:
        overrides["fast"] = True
    cfg = replace(cfg, **overrides)
    if not 0.0 < cfg.alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {cfg.alpha}")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def _write_json(path: Path, obj) -> None:
    with path.open("w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


# ------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig, args) -> None:
    dgp = cfg.dgp_config()
    base = cfg.covariate_base()
    seed = replication_seed(cfg.seed, 0, args.rep)
    params = fixed_params(dgp, base) if cfg.bench.get("fix_params") else None
    sim = simulate_replication(dgp, base, seed, params)
    truth = true_gate(dgp, sim.params, base, int(cfg.bench.get("n_oracle", 100_000)),
                      np.random.default_rng(np.random.SeedSequence([seed, 2])))
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(sim.rct, out / "rct.csv")
    for ds in sim.obs:
        save_dataset(ds, out / f"obs_{ds.source_id}.csv")
    _write_json(out / "params.json", sim.params.to_dict())
    _write_json(out / "truth.json", truth.to_dict())
    _write_json(out / "manifest.json", {
        "master_seed": cfg.seed, "rep": args.rep, "replication_seed": seed,
        "studies": [ds.source_id for ds in sim.obs],
        "biased_ids": sorted(dgp.biased_ids),
    })


def _load_study_dir(path: Path):
    if not path.is_dir():
        raise ConfigError(f"data directory {path} not found")
    schema = Schema(source="d")
    rct = load_dataset(path / "rct.csv", schema)
    obs_files = sorted(path.glob("obs_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    if not obs_files:
        raise ConfigError(f"no obs_*.csv files in {path}")
    return rct, [load_dataset(p, schema) for p in obs_files]


def cmd_estimate(cfg: RunConfig, args) -> None:
    data_dir = Path(args.data)
    rct, obs = _load_study_dir(data_dir)
    manifest = data_dir / "manifest.json"
    if args.seed is None and manifest.exists():
        seed = int(_read_json(manifest)["replication_seed"])
    else:
        seed = replication_seed(cfg.seed, 0, args.rep)
    rct_est, per_study = estimate_all(rct, obs, seed, NuisanceConfig(fast=cfg.fast))
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    dump_estimates(rct_est, out / "rct.json")
    dump_estimates([e for k in sorted(per_study) for e in per_study[k]], out / "est.json")


def _group_by_estimator(rows) -> dict[int, list[GateEstimate]]:
    table: dict[int, list[GateEstimate]] = {}
    for e in estimates_from_json(rows):
        table.setdefault(e.estimator_id, []).append(e)
    return table


def cmd_falsify(cfg: RunConfig, args) -> None:
    if not args.estimates or not args.rct:
        raise ConfigError("falsify needs --estimates and --rct")
    try:
        rct = estimates_from_json(_read_json(args.rct))
        est = _group_by_estimator(_read_json(args.estimates))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed estimates file: {exc}") from None
    report = falsify(rct, est, cfg.alpha)
    out = Path(args.report) if args.report else cfg.out / "falsify.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.dump(out)


def cmd_combine(cfg: RunConfig, args) -> None:
    if not args.estimates or not args.report:
        raise ConfigError("combine needs --estimates and --report")
    try:
        est = _group_by_estimator(_read_json(args.estimates))
        report = FalsificationReport.from_dict(_read_json(args.report))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed input: {exc}") from None
    all_groups = {e.group for ests in est.values() for e in ests}
    groups = sorted(all_groups - set(report.validation_groups))
    methods = tuple(cfg.bench.get("methods", METHODS))
    sets = combine_all(report.accepted, est, groups, report.alpha, methods)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_intervals(sets, cfg.out / "intervals.json", cfg.out / "intervals.csv")


def cmd_bench(cfg: RunConfig, args) -> None:
    if not args.config:
        raise ConfigError("bench needs --config\n" + build_parser().format_usage())
    spec = cfg.experiment()
    if args.replications is not None:
        spec = replace(spec, replications=args.replications)
    result = run_experiment(spec, cfg.covariate_base(), threads=cfg.threads)
    write_outputs(result, cfg.out)


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "falsify": cmd_falsify,
    "combine": cmd_combine,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatefalsify", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--alpha", type=float)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int)
        p.add_argument("--fast", action="store_true", help="ridge nuisances instead of MLP grids")
        if mode in ("simulate", "estimate"):
            p.add_argument("--rep", type=int, default=0, help="replication index")
        if mode == "estimate":
            p.add_argument("--data", required=True, help="directory written by simulate")
        if mode in ("falsify", "combine"):
            p.add_argument("--estimates", help="est.json from estimate")
            p.add_argument("--report", help="falsification report path")
        if mode == "falsify":
            p.add_argument("--rct", help="rct.json from estimate")
        if mode == "bench":
            p.add_argument("--replications", type=int)
    return parser


def _fail(code: int, exc: Exception) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_run_config(args)
        COMMANDS[args.mode](cfg, args)
    except (ConfigError, ParseError, SupportError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except GateError as exc:
        return _fail(EXIT_ESTIMATION, exc)
    except (TypeError, ValueError) as exc:
        # bad values reaching dataclass validation from the config file
        return _fail(EXIT_CONFIG, exc)
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
