"""Monte Carlo harness: coverage, width and biased-study selection across sweeps.

Seeds
-----
Every replication gets one integer seed, derived from the master seed and
its (sweep point, replication) counter.  From that integer:

* ``[seed, 1]`` drives data generation,
* ``[seed, 2]`` drives the Monte Carlo truth,
* ``[seed, 3, k, kind]`` seeds the cross-fitting plans of study ``k``.

The CLI's ``simulate`` / ``estimate`` subcommands use the same derivation,
so running them by hand with a replication's seed reproduces that
replication exactly.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .combine import METHODS, combine_all
from .data import GROUP_LABELS, Dataset, split_support
from .errors import ConfigError, EstimationError, GateError
from .estimators import (
    GateEstimate,
    dr_score_gate,
    pooled_size,
    rct_gate,
    transported_gate,
)
from .falsify import FalsificationReport, falsify
from .nuisance import NuisanceConfig, make_crossfit_plan
from .simgen import (
    CovariateBase,
    DgpConfig,
    OutcomeParams,
    SimulatedData,
    draw_outcome_params,
    simulate,
    synthetic_ihdp_covariates,
    true_gate,
)

R_SWEEP = (1, 3, 5, 10)
CZ_SWEEP = ((0, 0, 0, 0, 0), (0, 0, 0, 0, 3), (0, 0, 0, 3, 3), (0, 3, 3, 3, 3))
MAX_FAILED_FRACTION = 0.05


@dataclass(frozen=True)
class ExperimentSpec:
    base: DgpConfig = field(default_factory=DgpConfig)
    sweep: str = "none"
    values: tuple = ()
    replications: int = 100
    methods: tuple = METHODS
    fast: bool = False
    fix_params: bool = False
    n_oracle: int = 100_000

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.sweep not in ("none", "r", "c_z"):
            raise ConfigError(f"sweep must be none, r or c_z; got {self.sweep!r}")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}")

    def points(self) -> list[tuple[str, DgpConfig]]:
        from dataclasses import replace

        if self.sweep == "none":
            return [("default", self.base)]
        if self.sweep == "r":
            vals = self.values or R_SWEEP
            return [(f"r={v:g}", replace(self.base, r=v)) for v in vals]
        vals = self.values or CZ_SWEEP
        return [
            ("c_z=" + "-".join(str(int(c)) for c in v), replace(self.base, c_z=tuple(v), K=len(v)))
            for v in vals
        ]

    def nuisance_config(self) -> NuisanceConfig:
        return NuisanceConfig(fast=self.fast)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base"]["c_z"] = list(self.base.c_z)
        d["values"] = [list(v) if isinstance(v, (tuple, list)) else v for v in self.values]
        d["methods"] = list(self.methods)
        return d


def replication_seed(master: int, point: int, rep: int) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=(int(point), int(rep)))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _plan_seed(seed: int, k: int, kind: int) -> int:
    return int(np.random.SeedSequence([int(seed), 3, int(k), int(kind)]).generate_state(1)[0])


def fixed_params(cfg: DgpConfig, base: CovariateBase) -> OutcomeParams:
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0]))
    return draw_outcome_params(base.d, cfg.n_confounders, rng, cfg.omega)


def simulate_replication(cfg: DgpConfig, base: CovariateBase, seed: int,
                         params: OutcomeParams | None = None) -> SimulatedData:
    return simulate(cfg, base, np.random.SeedSequence([int(seed), 1]), params)


def estimate_all(rct: Dataset, obs: Sequence[Dataset], seed: int,
                 config: NuisanceConfig | None = None):
    """Trial estimates plus, per study, validation + extrapolated GATE estimates.

    Returns ``(rct_estimates, {estimator_id: [GateEstimate]})``; study ids are
    their ``source_id``.
    """
    config = config or NuisanceConfig()
    support = split_support(rct, obs)
    v_groups = sorted(support.validation_groups)
    rct_est = rct_gate(rct)
    per_study: dict[int, list[GateEstimate]] = {}
    for k, ds in enumerate(obs):
        eid = ds.source_id
        plan_o = make_crossfit_plan(ds.n, config.folds, _plan_seed(seed, k, 0))
        dr = dr_score_gate(ds, plan_o, config, estimator_id=eid)
        plan_t = make_crossfit_plan(pooled_size(rct, ds, v_groups), config.folds,
                                    _plan_seed(seed, k, 1))
        tr = transported_gate(rct, ds, plan_t, v_groups, config, estimator_id=eid)
        by_group = {e.group: e for e in dr}
        by_group.update({e.group: e for e in tr})
        per_study[eid] = [by_group[i] for i in sorted(by_group)]
    return rct_est, per_study


@dataclass
class ReplicationResult:
    point: int
    rep: int
    seed: int
    ok: bool = True
    error: str | None = None
    accepted: tuple = ()
    truth: dict = field(default_factory=dict)
    intervals: dict = field(default_factory=dict)  # method -> {group: (lower, upper)} or None

    def covered(self, method: str, group: int) -> bool:
        ivs = self.intervals.get(method)
        if ivs is None:
            return False
        lo, hi = ivs[group]
        return lo <= self.truth[group] <= hi

    def width(self, method: str, group: int) -> float | None:
        ivs = self.intervals.get(method)
        if ivs is None:
            return None
        lo, hi = ivs[group]
        return hi - lo


def run_replication(cfg: DgpConfig, base: CovariateBase, seed: int, point: int = 0, rep: int = 0,
                    methods: Sequence[str] = METHODS, config: NuisanceConfig | None = None,
                    n_oracle: int = 100_000, params: OutcomeParams | None = None,
                    return_report: bool = False):
    sim = simulate_replication(cfg, base, seed, params)
    truth = true_gate(cfg, sim.params, base, n_oracle,
                      np.random.default_rng(np.random.SeedSequence([int(seed), 2])))
    result = ReplicationResult(point, rep, int(seed), truth=dict(truth.tau))
    try:
        rct_est, per_study = estimate_all(sim.rct, sim.obs, seed, config)
        report = falsify(rct_est, per_study, cfg.alpha)
    except GateError as exc:
        result.ok = False
        result.error = f"{type(exc).__name__}: {exc}"
        return (result, None) if return_report else result
    groups = sorted(sim.support.extrapolated_groups)
    sets = combine_all(report.accepted, per_study, groups, cfg.alpha, methods)
    result.accepted = tuple(sorted(report.accepted))
    result.intervals = {
        m: None if s.no_survivor else {g: (s.intervals[g].lower, s.intervals[g].upper)
                                       for g in groups}
        for m, s in sets.items()
    }
    return (result, report) if return_report else result


def _task(args):
    cfg, base, seed, point, rep, methods, config, n_oracle, params = args
    return run_replication(cfg, base, seed, point, rep, methods, config, n_oracle, params)


# --------------------------------------------------------------- results


def _binom(k: int, n: int):
    p = k / n if n else float("nan")
    se = math.sqrt(p * (1 - p) / n) if n else float("nan")
    return p, se


def selection_rate(accepted_sets: Sequence, biased_ids) -> float:
    """Share of replications whose survivors include at least one biased study."""
    biased = set(biased_ids)
    if not accepted_sets or not biased:
        return 0.0
    return sum(1 for acc in accepted_sets if biased & set(acc)) / len(accepted_sets)


@dataclass
class BenchResult:
    spec: ExperimentSpec
    master_seed: int
    labels: list
    records: list
    coverage: list = field(default_factory=list)
    width: list = field(default_factory=list)
    selection: list = field(default_factory=list)

    def ok_records(self, point: int):
        return [r for r in self.records if r.point == point and r.ok]

    def aggregate(self, configs: Sequence[DgpConfig]) -> None:
        self.coverage, self.width, self.selection = [], [], []
        for j, (label, cfg) in enumerate(zip(self.labels, configs)):
            recs = self.ok_records(j)
            n = len(recs)
            groups = sorted(recs[0].truth) if recs else []
            groups = [g for g in groups if any(g in (r.intervals.get(m) or {})
                                               for r in recs for m in r.intervals)]
            for m in self.spec.methods:
                for g in groups:
                    k = sum(r.covered(m, g) for r in recs)
                    p, se = _binom(k, n)
                    self.coverage.append({
                        "sweep": label, "method": m, "group": g, "label": GROUP_LABELS[g],
                        "n": n, "coverage": p, "se": se,
                        "ci_lower": max(0.0, p - 1.96 * se), "ci_upper": min(1.0, p + 1.96 * se),
                    })
                    widths = [w for w in (r.width(m, g) for r in recs) if w is not None]
                    self.width.append({
                        "sweep": label, "method": m, "group": g, "label": GROUP_LABELS[g],
                        "n": len(widths), "no_survivor": n - len(widths),
                        "mean_width": float(np.mean(widths)) if widths else float("nan"),
                    })
            rate = selection_rate([r.accepted for r in recs], cfg.biased_ids)
            self.selection.append({
                "sweep": label, "n": n, "biased_ids": sorted(cfg.biased_ids),
                "p_select_biased": rate,
                "se": math.sqrt(rate * (1 - rate) / n) if n else float("nan"),
                "failed": sum(1 for r in self.records if r.point == j and not r.ok),
            })

    def lookup(self, table: str, **key):
        rows = [r for r in getattr(self, table) if all(r[k] == v for k, v in key.items())]
        if len(rows) != 1:
            raise KeyError(f"{table}: {len(rows)} rows match {key}")
        return rows[0]


def run_experiment(spec: ExperimentSpec, base: CovariateBase | None = None, threads: int = 1,
                   progress=None) -> BenchResult:
    master = int(spec.base.seed)
    base = base or synthetic_ihdp_covariates(seed=master)
    points = spec.points()
    config = spec.nuisance_config()
    tasks = []
    for j, (_, cfg) in enumerate(points):
        params = fixed_params(cfg, base) if spec.fix_params else None
        for rep in range(spec.replications):
            tasks.append((cfg, base, replication_seed(master, j, rep), j, rep, spec.methods,
                          config, spec.n_oracle, params))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = []
            for r in pool.map(_task, tasks, chunksize=1):
                records.append(r)
                if progress:
                    progress(r)
    else:
        records = []
        for t in tasks:
            r = _task(t)
            records.append(r)
            if progress:
                progress(r)
    records.sort(key=lambda r: (r.point, r.rep))
    failed = [r for r in records if not r.ok]
    if len(failed) > MAX_FAILED_FRACTION * len(records):
        details = "; ".join(f"point {r.point} rep {r.rep}: {r.error}" for r in failed[:5])
        raise EstimationError(
            f"{len(failed)} of {len(records)} replications failed (limit 5%): {details}"
        )
    result = BenchResult(spec, master, [lab for lab, _ in points], records)
    result.aggregate([cfg for _, cfg in points])
    return result


def width_table(result: BenchResult) -> list[dict]:
    return [{"group": r["label"], "method": r["method"], "sweep": r["sweep"],
             "mean_width": r["mean_width"]} for r in result.width]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([_fmt(v) if not isinstance(v, list) else " ".join(map(str, v))
                        for v in r.values()])


def write_outputs(result: BenchResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "coverage.csv", result.coverage)
    _write_csv(out / "width.csv", width_table(result))
    _write_csv(out / "selection.csv", result.selection)
    report = {
        "master_seed": result.master_seed,
        "spec": result.spec.to_dict(),
        "sweep_points": result.labels,
        "coverage": result.coverage,
        "width": result.width,
        "selection": result.selection,
        "replications": [
            {"point": r.point, "rep": r.rep, "seed": r.seed, "ok": r.ok, "error": r.error,
             "accepted": list(r.accepted),
             "truth": {str(g): v for g, v in sorted(r.truth.items())},
             "intervals": {m: (None if iv is None else
                               {str(g): list(b) for g, b in sorted(iv.items())})
                           for m, iv in r.intervals.items()}}
            for r in result.records
        ],
    }
    with (out / "report.json").open("w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, allow_nan=True)
        fh.write("\n")
