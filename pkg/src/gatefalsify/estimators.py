"""Group average treatment effect (GATE) estimators.

Three estimators produce :class:`GateEstimate` lists:

* :func:`rct_gate` -- inverse-probability difference of means on trial data.
* :func:`dr_score_gate` -- doubly robust scores regressed on group dummies
  (observational population, all groups), with the heteroskedasticity-robust
  sandwich for the variance.
* :func:`transported_gate` -- doubly robust scores transported to the trial
  population and reweighted by ``1 / P(S=0 | G)`` (validation groups only).

``asym_var`` is always the variance of ``sqrt(n_used) * (point - truth)``,
so the standard error is ``sqrt(asym_var / n_used)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset
from .errors import EstimationError, TransportDegeneracyError
from .nuisance import PROB_CLIP, CrossFitPlan, NuisanceConfig, crossfit_predict

LOW_SAMPLE_ROWS = 20


@dataclass(frozen=True)
class GateEstimate:
    group: int
    point: float
    asym_var: float
    n_used: int
    estimator_id: int
    low_sample: bool = False

    def __post_init__(self):
        if not self.asym_var >= 0:
            raise EstimationError(f"group {self.group}: negative or NaN variance {self.asym_var}")
        if self.n_used < 1:
            raise EstimationError(f"group {self.group}: n_used must be >= 1")

    @property
    def se(self) -> float:
        return float(np.sqrt(self.asym_var / self.n_used))

    def to_dict(self) -> dict:
        d = asdict(self)
        if not d["low_sample"]:
            del d["low_sample"]
        return d

    @classmethod
    def from_dict(cls, d) -> "GateEstimate":
        return cls(
            group=int(d["group"]), point=float(d["point"]), asym_var=float(d["asym_var"]),
            n_used=int(d["n_used"]), estimator_id=int(d["estimator_id"]),
            low_sample=bool(d.get("low_sample", False)),
        )


def estimates_to_json(estimates: Iterable[GateEstimate]) -> list[dict]:
    return [e.to_dict() for e in estimates]


def estimates_from_json(rows) -> list[GateEstimate]:
    return [GateEstimate.from_dict(r) for r in rows]


def dump_estimates(estimates, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(estimates_to_json(estimates), fh, indent=2)
        fh.write("\n")


# ------------------------------------------------------------------- RCT


def rct_gate(ds_rct: Dataset, estimator_id: int = 0) -> list[GateEstimate]:
    """Per-group mean of ``Y * (A/P - (1-A)/(1-P))`` with P the overall treated share."""
    A = ds_rct.treatment.astype(float)
    p_treat = A.mean()
    if p_treat in (0.0, 1.0):
        raise EstimationError("RCT has a single treatment arm")
    signal = ds_rct.outcome * (A / p_treat - (1 - A) / (1 - p_treat))
    out = []
    for i in np.flatnonzero(ds_rct.group_counts() > 0):
        mask = ds_rct.group == i
        n1 = int(np.sum(A[mask] == 1))
        n0 = int(mask.sum()) - n1
        if n1 < 2 or n0 < 2:
            raise EstimationError(
                f"RCT group {i}: need >= 2 treated and >= 2 control rows, have {n1}/{n0}"
            )
        s = signal[mask]
        out.append(GateEstimate(int(i), float(s.mean()), float(s.var()), int(mask.sum()),
                                estimator_id))
    return out


# ---------------------------------------------------- DR score on one study


def dr_scores(y, a, mu1, mu0, s) -> np.ndarray:
    """Doubly robust CATE signal for each row."""
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    return mu1 - mu0 + a * (y - mu1) / s - (1 - a) * (y - mu0) / (1 - s)


def group_dummy_regression(scores, groups, n_groups: int):
    """OLS of ``scores`` on group dummies with the sandwich covariance.

    Returns ``(coef, omega)`` where ``omega`` is
    ``(G'G/N)^-1 (sum G G' r^2 / N) (G'G/N)^-1``.
    """
    scores = np.asarray(scores, dtype=float)
    groups = np.asarray(groups)
    N = len(scores)
    G = np.zeros((N, n_groups))
    G[np.arange(N), groups] = 1.0
    bread = G.T @ G / N
    if np.any(np.diag(bread) == 0):
        empty = np.flatnonzero(np.diag(bread) == 0).tolist()
        raise EstimationError(f"groups {empty} have no rows; dummy regression is singular")
    bread_inv = np.linalg.inv(bread)
    coef = bread_inv @ (G.T @ scores / N)
    r = scores - G @ coef
    meat = (G.T * r**2) @ G / N
    omega = bread_inv @ meat @ bread_inv
    return coef, omega


def dr_score_gate(ds_obs: Dataset, plan: CrossFitPlan, config: NuisanceConfig | None = None,
                  estimator_id: int | None = None, nuisances: dict | None = None
                  ) -> list[GateEstimate]:
    """GATEs in the study's own population for every group.

    ``nuisances`` (keys ``g1``, ``g0``, ``e1``) bypasses cross-fitting, e.g.
    to plug in the true regression and propensity functions.
    """
    eid = ds_obs.source_id if estimator_id is None else estimator_id
    if nuisances is None:
        nuisances = crossfit_predict(ds_obs.covariates, ds_obs.treatment, ds_obs.outcome, plan,
                                     ("g1", "g0", "e1"), config=config)
    s = np.clip(nuisances["e1"], PROB_CLIP, 1 - PROB_CLIP)
    scores = dr_scores(ds_obs.outcome, ds_obs.treatment, nuisances["g1"], nuisances["g0"], s)
    coef, omega = group_dummy_regression(scores, ds_obs.group, ds_obs.n_groups)
    return [
        GateEstimate(i, float(coef[i]), float(omega[i, i]), ds_obs.n, eid)
        for i in range(ds_obs.n_groups)
    ]


# ------------------------------------------------------ transported score


def selection_share(S, G, groups: Sequence[int]) -> dict[int, float]:
    """Empirical P(S=0 | G=i) for each listed group."""
    S = np.asarray(S)
    G = np.asarray(G)
    out = {}
    for i in groups:
        m = G == i
        if not m.any():
            raise TransportDegeneracyError(f"group {i} has no pooled rows")
        pi = float(np.mean(S[m] == 0))
        if pi in (0.0, 1.0):
            raise TransportDegeneracyError(
                f"group {i}: P(S=0|G) estimated as {pi:g}; need rows from both sources"
            )
        out[int(i)] = pi
    return out


def transport_scores(S, A, Y, G, g1, g0, e1, p, pi_g: dict[int, float]) -> np.ndarray:
    """Per-row transported signal ``Y~1 - Y~0``.

    ``Y~a = [1{S=1,A=a} (1-p)/(p e_a) (Y - g_a) + (1-S) g_a] / pi_g(G)``
    with ``e_0 = 1 - e_1``.
    """
    S = np.asarray(S, dtype=float)
    A = np.asarray(A, dtype=float)
    Y = np.asarray(Y, dtype=float)
    odds = (1 - p) / p
    e0 = 1 - e1
    y1 = S * A * odds / e1 * (Y - g1) + (1 - S) * g1
    y0 = S * (1 - A) * odds / e0 * (Y - g0) + (1 - S) * g0
    G = np.asarray(G)
    lut = np.full(max(max(pi_g), int(G.max(initial=0))) + 1, np.nan)
    for i, pi in pi_g.items():
        lut[i] = 1.0 / pi
    return lut[G] * (y1 - y0)


@dataclass(frozen=True)
class PooledSample:
    """Validation-group rows of the trial (S=0) stacked over one study (S=1)."""

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    G: np.ndarray
    S: np.ndarray

    @property
    def n(self) -> int:
        return len(self.Y)


def pool_for_transport(ds_rct: Dataset, ds_obs: Dataset, groups: Sequence[int]) -> PooledSample:
    """Stack trial and study rows in ``groups``; the trial is aligned to the study's columns."""
    rct = ds_rct.select_columns(ds_obs.covariate_names)
    keep_r = np.isin(rct.group, list(groups))
    keep_o = np.isin(ds_obs.group, list(groups))
    return PooledSample(
        X=np.vstack([rct.covariates[keep_r], ds_obs.covariates[keep_o]]),
        A=np.concatenate([rct.treatment[keep_r], ds_obs.treatment[keep_o]]),
        Y=np.concatenate([rct.outcome[keep_r], ds_obs.outcome[keep_o]]),
        G=np.concatenate([rct.group[keep_r], ds_obs.group[keep_o]]),
        S=np.concatenate([np.zeros(keep_r.sum(), np.int8), np.ones(keep_o.sum(), np.int8)]),
    )


def transported_from_scores(scores, pooled: PooledSample, groups: Sequence[int],
                            estimator_id: int) -> list[GateEstimate]:
    out = []
    for i in sorted(groups):
        m = pooled.G == i
        n_obs = int(np.sum(m & (pooled.S == 1)))
        v = scores[m]
        out.append(GateEstimate(int(i), float(v.mean()), float(v.var()), int(m.sum()),
                                estimator_id, low_sample=n_obs < LOW_SAMPLE_ROWS))
    return out


def transported_gate(ds_rct: Dataset, ds_obs: Dataset, plan: CrossFitPlan,
                     validation_groups: Sequence[int] | None = None,
                     config: NuisanceConfig | None = None, estimator_id: int | None = None,
                     nuisances: dict | None = None) -> list[GateEstimate]:
    """Validation-effect estimates of one study, transported to the trial population.

    ``plan`` must cover the pooled sample (trial rows first, then study rows,
    both restricted to ``validation_groups``).  ``nuisances`` (keys ``g1``,
    ``g0``, ``e1``, ``p``, aligned with the pooled rows) bypasses cross-fitting.
    """
    eid = ds_obs.source_id if estimator_id is None else estimator_id
    if validation_groups is None:
        validation_groups = np.flatnonzero(ds_rct.group_counts() > 0).tolist()
    pooled = pool_for_transport(ds_rct, ds_obs, validation_groups)
    pi_g = selection_share(pooled.S, pooled.G, validation_groups)
    if nuisances is None:
        nuisances = crossfit_predict(pooled.X, pooled.A, pooled.Y, plan, ("g1", "g0", "e1", "p"),
                                     selection=pooled.S, config=config)
    e1 = np.clip(nuisances["e1"], PROB_CLIP, 1 - PROB_CLIP)
    p = np.clip(nuisances["p"], PROB_CLIP, 1 - PROB_CLIP)
    scores = transport_scores(pooled.S, pooled.A, pooled.Y, pooled.G, nuisances["g1"],
                              nuisances["g0"], e1, p, pi_g)
    return transported_from_scores(scores, pooled, validation_groups, eid)


def pooled_size(ds_rct: Dataset, ds_obs: Dataset, groups: Sequence[int]) -> int:
    """Row count of the pooled sample, for building a matching :class:`CrossFitPlan`."""
    return int(np.isin(ds_rct.group, list(groups)).sum() + np.isin(ds_obs.group, list(groups)).sum())
