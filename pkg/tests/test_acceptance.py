"""Acceptance criteria, one PASS/FAIL line each.

The simulation criteria share session-scoped benchmark runs in fast mode.
Set ``GATEFALSIFY_IHDP_CSV`` to a real IHDP covariate file to also check the
absolute selection probabilities against the published table; without it
the synthetic covariate base is used and that comparison is skipped.
"""

import math
import os

import numpy as np
import pytest

from oracles import bisect_quantile, response_means, study_propensity, study_selection
from gatefalsify.bench import ExperimentSpec, run_experiment, write_outputs
from gatefalsify.combine import dl_meta, estimator_ci
from gatefalsify.data import Dataset
from gatefalsify.estimators import GateEstimate, group_dummy_regression, transported_gate
from gatefalsify.falsify import asymptotic_power, normal_quantile, test_statistic, z_upper
from gatefalsify.nuisance import PROB_CLIP
from gatefalsify.simgen import (
    RCT_GROUPS,
    DgpConfig,
    draw_outcome_params,
    load_covariate_base,
    selection_weights,
    simulate_outcomes,
    synthesize_confounders,
    synthetic_ihdp_covariates,
)

REPLICATIONS = 100
SEED = 20240501
EXTRAPOLATED = (0, 2)  # LS, HS
PUBLISHED_SELECTION = {1: 0.98, 3: 0.80, 5: 0.68, 10: 0.60}
IHDP_CSV = os.environ.get("GATEFALSIFY_IHDP_CSV", "")


def covariate_base(seed):
    if IHDP_CSV:
        return load_covariate_base(IHDP_CSV)
    return synthetic_ihdp_covariates(seed=seed)


def run(sweep="none", **kw):
    spec = ExperimentSpec(base=DgpConfig(seed=SEED), sweep=sweep, replications=REPLICATIONS,
                          fast=True, **kw)
    return run_experiment(spec, base=covariate_base(SEED))


@pytest.fixture(scope="session")
def default_run():
    return run()


@pytest.fixture(scope="session")
def r_sweep():
    return run("r")


def est(group, point, var, n, k):
    return GateEstimate(group, point, var, n, k)


# ------------------------------------------------------------ criterion 1


def test_hand_oracles(verdict):
    t = test_statistic(est(1, 2.0, 4.0, 400, 1), est(1, 1.5, 9.0, 100, 0)).t_value
    ci = estimator_ci(est(1, 2.0, 100.0, 400, 1), 0.05)
    meta = dl_meta([0.0, 2.0], [1.0, 1.0])
    half = z_upper(0.025) * math.sqrt(meta.pooled_var)
    _, omega = group_dummy_regression(np.array([1.0, -1.0, 1.0, -1.0, 5.0, 5.0, 5.0, 5.0]),
                                      np.array([0, 0, 0, 0, 1, 1, 1, 1]), 2)
    checks = [
        abs(t - 1.5811) <= 1e-4,
        abs(ci.lower - 1.0200) <= 1e-4 and abs(ci.upper - 2.9800) <= 1e-4,
        abs(meta.tau2 - 1.0) <= 1e-4 and abs(meta.pooled - 1.0) <= 1e-4,
        abs(meta.pooled - half - (1 - 1.96)) <= 1e-4 and abs(meta.pooled + half - 2.96) <= 1e-4,
        abs(omega[0, 0] - 2.0) <= 1e-4,
    ]
    verdict(1, all(checks),
            f"t={t:.5f}, ci=[{ci.lower:.4f}, {ci.upper:.4f}], tau2={meta.tau2:.4f}, "
            f"pooled={meta.pooled:.4f}+-{half:.4f}, omega_00={omega[0, 0]:.4f}")


# ------------------------------------------------------------ criterion 2


def test_normal_quantile_accuracy(verdict):
    errs = {p: abs(normal_quantile(p) - bisect_quantile(p)) for p in (0.5, 0.975, 0.9875, 0.99375)}
    worst = max(errs.values())
    verdict(2, worst <= 1e-7, f"max |quantile - bisection| = {worst:.2e}")


# ------------------------------------------------------- criteria 3 and 4


def rejection_rate(shift_over_se, alpha, rng, draws=100_000):
    """Share of Wald tests rejecting at level ``alpha`` when the study
    estimate sits ``shift_over_se`` test-standard-errors above the trial."""
    var_obs, n_obs, var_rct, n_rct = 4.0, 400, 9.0, 100
    se = math.sqrt(var_obs / n_obs + var_rct / n_rct)
    obs = shift_over_se * se + rng.normal(0.0, math.sqrt(var_obs / n_obs), draws)
    rct = rng.normal(0.0, math.sqrt(var_rct / n_rct), draws)
    z = z_upper(alpha / 2)
    rejected = 0
    for o, r in zip(obs, rct):
        t = test_statistic(est(1, float(o), var_obs, n_obs, 1), est(1, float(r), var_rct, n_rct, 0))
        rejected += abs(t.t_value) > z
    return rejected / draws


def test_null_calibration(verdict):
    rng = np.random.default_rng([SEED, 3])
    parts, ok = [], True
    for alpha in (0.01, 0.05, 0.1):
        rate = rejection_rate(0.0, alpha, rng)
        se = math.sqrt(alpha * (1 - alpha) / 100_000)
        ok &= abs(rate - alpha) <= 3 * se
        parts.append(f"alpha={alpha}: {rate:.5f} ({(rate - alpha) / se:+.2f} SE)")
    verdict(3, ok, "; ".join(parts))


def test_power_formula(verdict):
    rng = np.random.default_rng([SEED, 4])
    parts, ok = [], True
    for shift in (0.0, 1.0, 2.0, 3.0):
        rate = rejection_rate(shift, 0.05, rng)
        power = asymptotic_power(shift, 0.05)
        se = math.sqrt(power * (1 - power) / 100_000)
        ok &= abs(rate - power) <= 2 * se
        parts.append(f"mu/sigma={shift:g}: formula {power:.4f} vs MC {rate:.4f}")
    verdict(4, ok, "; ".join(parts))


# ------------------------------------------------------- criteria 5 and 6


def test_expcs_coverage(default_run, verdict):
    parts, ok = [], True
    for g in EXTRAPOLATED:
        row = default_run.lookup("coverage", method="ExPCS", group=g)
        floor = 0.95 - 3 * math.sqrt(0.95 * 0.05 / row["n"])
        ok &= row["coverage"] >= floor
        parts.append(f"group {g}: {row['coverage']:.2f} >= {floor:.3f} (n={row['n']})")
    verdict(5, ok, "ExPCS coverage " + "; ".join(parts))


def test_meta_analysis_degrades(default_run, verdict):
    parts, ok = [], True
    for g in EXTRAPOLATED:
        ex = default_run.lookup("coverage", method="ExPCS", group=g)["coverage"]
        meta = default_run.lookup("coverage", method="Meta", group=g)["coverage"]
        ok &= ex - meta >= 0.2
        parts.append(f"group {g}: ExPCS {ex:.2f} vs Meta {meta:.2f}")
    verdict(6, ok, "; ".join(parts))


# ------------------------------------------------------- criteria 7 and 8


def test_selection_trend(r_sweep, verdict):
    rows = [r_sweep.lookup("selection", sweep=f"r={r}") for r in (1, 3, 5, 10)]
    rates = [row["p_select_biased"] for row in rows]
    ok = all(b["p_select_biased"] <= a["p_select_biased"] + 2 * math.hypot(a["se"], b["se"])
             for a, b in zip(rows, rows[1:]))
    detail = "P(select biased) over r=1,3,5,10: " + ", ".join(f"{x:.2f}" for x in rates)
    if IHDP_CSV:
        gaps = [abs(x - PUBLISHED_SELECTION[r]) for x, r in zip(rates, (1, 3, 5, 10))]
        ok &= max(gaps) <= 0.15
        detail += f"; max gap to published values {max(gaps):.2f}"
    else:
        detail += "; absolute comparison skipped (synthetic covariates)"
    verdict(7, ok, detail)


def test_width_ordering(r_sweep, verdict):
    parts, ok = [], True
    for r in (3, 5, 10):
        for g in EXTRAPOLATED:
            ex = r_sweep.lookup("width", sweep=f"r={r}", method="ExPCS", group=g)["mean_width"]
            simple = r_sweep.lookup("width", sweep=f"r={r}", method="Simple",
                                    group=g)["mean_width"]
            ok &= ex <= simple
            parts.append(f"r={r} group {g}: {ex:.2f} vs {simple:.2f}")
    verdict(8, ok, "ExPCS vs Simple mean width " + "; ".join(parts))


# ------------------------------------------------------------ criterion 9


class OracleDesign:
    """One trial and one unconcealed study with every nuisance known in closed form."""

    def __init__(self, seed, r=1.0):
        self.cfg = DgpConfig(K=1, r=r, c_z=(0,))
        self.base = synthetic_ihdp_covariates(seed=seed)
        self.params = draw_outcome_params(self.base.d, self.cfg.n_confounders,
                                          np.random.default_rng(seed), self.cfg.omega)
        self.groups = self.base.groups()
        w = selection_weights(self.base)
        self.p_row = w / w.sum()
        self.married = np.flatnonzero(np.isin(self.groups, RCT_GROUPS))
        self.n_rct = len(self.married)
        self.n_obs = int(round(r * self.base.n))
        self.names = tuple(self.base.names) + tuple(f"z{j}" for j in range(self.cfg.n_confounders))
        m0, m1 = self.means(self.base.values, np.zeros((self.base.n, self.cfg.n_confounders)))
        cate = (m1 - m0)[self.married]
        self.tau = {i: float(cate[self.groups[self.married] == i].mean()) for i in RCT_GROUPS}

    def means(self, X, Z):
        p = self.params
        return response_means(X, Z, p.beta, p.gamma, p.omega)

    def draw(self, rng, scale=1):
        """Row indices, source flag, covariates and outcomes of one pooled sample."""
        rows = np.concatenate([rng.choice(self.married, scale * self.n_rct),
                               rng.choice(self.base.n, scale * self.n_obs, p=self.p_row)])
        S = np.repeat([0, 1], [scale * self.n_rct, scale * self.n_obs])
        X = self.base.values[rows]
        A = (rng.random(len(rows)) < 0.5).astype(np.int8)
        Z = np.vstack([
            synthesize_confounders(int((S == 0).sum()), A[S == 0], self.cfg.m_c, self.cfg.m_b,
                                   True, rng),
            synthesize_confounders(int((S == 1).sum()), A[S == 1], self.cfg.m_c, self.cfg.m_b,
                                   False, rng),
        ])
        Y = simulate_outcomes(X, A, Z, self.params, rng).y
        return rows, S, X, A, Z, Y

    def nuisances(self, rows, Z):
        X = self.base.values[rows]
        m0, m1 = self.means(X, Z)
        e1 = study_propensity(Z, self.cfg.m_c)
        p = study_selection(Z, self.cfg.m_c, self.n_obs * self.p_row[rows])
        return {"g1": m1, "g0": m0, "e1": e1, "p": p}

    def estimate(self, rng):
        rows, S, X, A, Z, Y = self.draw(rng)
        G = self.groups[rows]
        keep = np.isin(G, RCT_GROUPS)
        t, o = S == 0, S == 1
        rct = Dataset(np.hstack([X[t], Z[t]]), A[t], Y[t], G[t], 0, 4, self.names)
        obs = Dataset(np.hstack([X[o], Z[o]]), A[o], Y[o], G[o], 1, 4, self.names)
        nuis = {k: v[keep] for k, v in self.nuisances(rows, Z).items()}
        return int(keep.sum()), transported_gate(rct, obs, None, RCT_GROUPS, nuisances=nuis)

    def predicted_variance(self, rng, scale=400):
        """``(sigma^2 - pi (1 - pi) tau^2) / (pi^2 P(G=i))`` with ``sigma^2 = Var(U | G=i)``
        for the oracle signal ``U`` on a large pooled draw."""
        rows, S, X, A, Z, Y = self.draw(rng, scale)
        G = self.groups[rows]
        n = self.nuisances(rows, Z)
        e1 = np.clip(n["e1"], PROB_CLIP, 1 - PROB_CLIP)
        p = np.clip(n["p"], PROB_CLIP, 1 - PROB_CLIP)
        odds = (1 - p) / p
        residual = A * odds / e1 * (Y - n["g1"]) - (1 - A) * odds / (1 - e1) * (Y - n["g0"])
        U = np.where(S == 0, n["g1"] - n["g0"], residual)
        pooled = np.isin(G, RCT_GROUPS)
        out = {}
        for i in RCT_GROUPS:
            m = G == i
            pi = float(np.mean(S[m] == 0))
            share = m.sum() / pooled.sum()
            sigma2 = float(U[m].var())
            out[i] = (sigma2 - pi * (1 - pi) * self.tau[i] ** 2) / (pi**2 * share)
        return out


def test_oracle_variance(verdict):
    design = OracleDesign(seed=7)
    predicted = design.predicted_variance(np.random.default_rng(99))
    scaled = {i: [] for i in RCT_GROUPS}
    for rep in range(1000):
        n, ests = design.estimate(np.random.default_rng([7, rep]))
        for e in ests:
            scaled[e.group].append(math.sqrt(n) * (e.point - design.tau[e.group]))
    parts, ok = [], True
    for i in RCT_GROUPS:
        ratio = float(np.var(scaled[i], ddof=1)) / predicted[i]
        ok &= abs(ratio - 1) <= 0.15
        parts.append(f"group {i}: empirical/predicted = {ratio:.3f}")
    verdict(9, ok, "; ".join(parts))


# ----------------------------------------------------------- criterion 10


def test_bench_determinism(default_run, tmp_path, verdict):
    write_outputs(default_run, tmp_path / "first")
    write_outputs(run(), tmp_path / "second")
    names = ("coverage.csv", "width.csv", "selection.csv", "report.json")
    same = [(tmp_path / "first" / f).read_bytes() == (tmp_path / "second" / f).read_bytes()
            for f in names]
    verdict(10, all(same), "byte-identical outputs: " +
            ", ".join(f"{f}={'yes' if s else 'no'}" for f, s in zip(names, same)))
