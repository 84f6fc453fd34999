"""Shared argument handling for the experiment scripts."""

import argparse
import logging
import sys

from gatefalsify.bench import ExperimentSpec, run_experiment, write_outputs
from gatefalsify.simgen import DgpConfig, load_covariate_base, synthetic_ihdp_covariates


def parser(description: str, default_out: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--seed", type=int, default=20240501)
    p.add_argument("--replications", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--fast", action="store_true", help="fewer nuisance hyperparameters")
    p.add_argument("--covariates", default="", help="IHDP covariate CSV; synthetic if omitted")
    p.add_argument("--out", default=default_out)
    return p


def run(args, sweep: str) -> None:
    logging.basicConfig(level=logging.WARNING)
    spec = ExperimentSpec(base=DgpConfig(seed=args.seed), sweep=sweep,
                          replications=args.replications, fast=args.fast)
    base = (load_covariate_base(args.covariates) if args.covariates
            else synthetic_ihdp_covariates(seed=args.seed))
    total = len(spec.points()) * spec.replications
    done = 0

    def progress(_record):
        nonlocal done
        done += 1
        print(f"\r{done}/{total} replications", end="", file=sys.stderr)

    result = run_experiment(spec, base, threads=args.threads, progress=progress)
    print(file=sys.stderr)
    write_outputs(result, args.out)
    print(f"{'sweep':<16}{'method':<8}{'group':>6}{'coverage':>10}{'width':>9}")
    for row in result.coverage:
        width = result.lookup("width", sweep=row["sweep"], method=row["method"],
                              group=row["group"])["mean_width"]
        print(f"{row['sweep']:<16}{row['method']:<8}{row['group']:>6}"
              f"{row['coverage']:>10.2f}{width:>9.2f}")
    for row in result.selection:
        print(f"{row['sweep']}: P(select biased) = {row['p_select_biased']:.2f} "
              f"(se {row['se']:.2f}, failed {row['failed']})")
    print(f"outputs written to {args.out}")
