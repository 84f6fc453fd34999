"""Confidence intervals for extrapolated groups and the ways of combining them.

Methods
-------
ExPCS   envelope of level ``1 - alpha/2`` intervals over surviving estimators
ExOCS   DerSimonian-Laird random-effects pooling over surviving estimators
Meta    DerSimonian-Laird pooling over every estimator
Simple  envelope of level ``1 - alpha`` intervals over every estimator
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, MetaAnalysisError
from .estimators import GateEstimate
from .falsify import z_upper

METHODS = ("ExPCS", "ExOCS", "Meta", "Simple")


@dataclass(frozen=True)
class ConfidenceInterval:
    group: int
    lower: float
    upper: float
    level: float
    method: str = "per-estimator"

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValueError(f"interval lower {self.lower} exceeds upper {self.upper}")
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"level must lie in (0, 1), got {self.level}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        # closed interval
        return self.lower <= value <= self.upper


@dataclass(frozen=True)
class IntervalSet:
    method: str
    intervals: dict  # group -> ConfidenceInterval
    no_survivor: bool = False
    diagnostic: str | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "no_survivor": self.no_survivor,
            "diagnostic": self.diagnostic,
            "intervals": [asdict(self.intervals[g]) for g in sorted(self.intervals)],
        }


def _no_survivor(method: str) -> IntervalSet:
    return IntervalSet(method, {}, no_survivor=True,
                       diagnostic="every estimator was falsified; no interval is reported")


def estimator_ci(e: GateEstimate, alpha_prime: float, method: str = "per-estimator"
                 ) -> ConfidenceInterval:
    """``point +- z_{alpha'/2} * sigma / sqrt(N)``."""
    half = z_upper(alpha_prime / 2) * math.sqrt(e.asym_var / e.n_used)
    return ConfidenceInterval(e.group, e.point - half, e.point + half, 1 - alpha_prime, method)


def _by_group(estimates: Mapping[int, Sequence[GateEstimate]], ids, groups):
    table = {}
    for k in sorted(ids):
        by_g = {e.group: e for e in estimates[k]}
        for i in groups:
            if i not in by_g:
                raise ConfigError(f"estimator {k} has no estimate for group {i}")
            table.setdefault(i, []).append(by_g[i])
    return table


def envelope(estimates: Mapping[int, Sequence[GateEstimate]], ids, groups, alpha_prime: float,
             method: str) -> IntervalSet:
    table = _by_group(estimates, ids, groups)
    out = {}
    for i, ests in table.items():
        cis = [estimator_ci(e, alpha_prime) for e in ests]
        out[i] = ConfidenceInterval(i, min(c.lower for c in cis), max(c.upper for c in cis),
                                    1 - alpha_prime, method)
    return IntervalSet(method, out)


def expcs(accepted: Iterable[int], estimates: Mapping[int, Sequence[GateEstimate]],
          groups: Sequence[int], alpha: float = 0.05) -> IntervalSet:
    accepted = sorted(set(accepted))
    if not accepted:
        return _no_survivor("ExPCS")
    return envelope(estimates, accepted, groups, alpha / 2, "ExPCS")


def simple_union(estimates: Mapping[int, Sequence[GateEstimate]], groups: Sequence[int],
                 alpha: float = 0.05) -> IntervalSet:
    if not estimates:
        raise ConfigError("simple union needs at least one estimator")
    return envelope(estimates, list(estimates), groups, alpha, "Simple")


@dataclass(frozen=True)
class MetaAnalysisResult:
    pooled: float
    pooled_var: float
    tau2: float
    weights: tuple
    q: float = 0.0


def dl_meta(points: Sequence[float], variances: Sequence[float]) -> MetaAnalysisResult:
    """DerSimonian-Laird random-effects pooling.

    ``variances`` are squared standard errors of the study estimates.
    """
    theta = np.asarray(points, dtype=float)
    v = np.asarray(variances, dtype=float)
    if len(theta) < 2:
        raise MetaAnalysisError(f"meta-analysis needs >= 2 studies, got {len(theta)}")
    if len(v) != len(theta):
        raise MetaAnalysisError("points and variances differ in length")
    if np.any(~(v > 0)) or np.any(~np.isfinite(v)):
        raise MetaAnalysisError("study variances must be positive and finite")
    w = 1.0 / v
    fixed = np.sum(w * theta) / np.sum(w)
    q = float(np.sum(w * (theta - fixed) ** 2))
    c = float(np.sum(w) - np.sum(w**2) / np.sum(w))
    tau2 = max(0.0, (q - (len(theta) - 1)) / c)
    w_star = 1.0 / (v + tau2)
    pooled = float(np.sum(w_star * theta) / np.sum(w_star))
    # the weighted mean can drift an ulp outside the data range
    pooled = min(max(pooled, float(theta.min())), float(theta.max()))
    return MetaAnalysisResult(pooled, float(1.0 / np.sum(w_star)), tau2, tuple(w_star.tolist()), q)


def _meta_intervals(estimates, ids, groups, alpha, method) -> IntervalSet:
    ids = sorted(ids)
    if len(ids) == 1:
        # a single study is its own interval
        single = envelope(estimates, ids, groups, alpha, method)
        return single
    table = _by_group(estimates, ids, groups)
    z = z_upper(alpha / 2)
    out = {}
    for i, ests in table.items():
        res = dl_meta([e.point for e in ests], [e.asym_var / e.n_used for e in ests])
        half = z * math.sqrt(res.pooled_var)
        out[i] = ConfidenceInterval(i, res.pooled - half, res.pooled + half, 1 - alpha, method)
    return IntervalSet(method, out)


def exocs(accepted: Iterable[int], estimates: Mapping[int, Sequence[GateEstimate]],
          groups: Sequence[int], alpha: float = 0.05) -> IntervalSet:
    accepted = sorted(set(accepted))
    if not accepted:
        return _no_survivor("ExOCS")
    return _meta_intervals(estimates, accepted, groups, alpha, "ExOCS")


def meta_analysis(estimates: Mapping[int, Sequence[GateEstimate]], groups: Sequence[int],
                  alpha: float = 0.05) -> IntervalSet:
    if not estimates:
        raise ConfigError("meta-analysis needs at least one estimator")
    return _meta_intervals(estimates, list(estimates), groups, alpha, "Meta")


def combine_all(accepted, estimates, groups, alpha: float = 0.05,
                methods: Sequence[str] = METHODS) -> dict[str, IntervalSet]:
    builders = {
        "ExPCS": lambda: expcs(accepted, estimates, groups, alpha),
        "ExOCS": lambda: exocs(accepted, estimates, groups, alpha),
        "Meta": lambda: meta_analysis(estimates, groups, alpha),
        "Simple": lambda: simple_union(estimates, groups, alpha),
    }
    unknown = set(methods) - set(builders)
    if unknown:
        raise ConfigError(f"unknown combination methods {sorted(unknown)}")
    return {m: builders[m]() for m in methods}


def write_intervals(sets: Mapping[str, IntervalSet], json_path=None, csv_path=None) -> None:
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump([sets[m].to_dict() for m in sets], fh, indent=2)
            fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "group", "lower", "upper", "level"])
            for m, s in sets.items():
                for g in sorted(s.intervals):
                    ci = s.intervals[g]
                    w.writerow([m, g, repr(ci.lower), repr(ci.upper), repr(ci.level)])
