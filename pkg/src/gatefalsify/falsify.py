"""Falsification tests of observational estimators against trial estimates.

For estimator ``k`` and validation group ``i`` the Wald statistic is::

    t = (tau_k - tau_0 - mu) / sqrt(var_k / N_k + var_0 / N_0)

An estimator survives when ``|t|`` stays below the Bonferroni threshold
``z`` at quantile ``1 - alpha / (4 |I_R|)`` in every validation group.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .errors import ConfigError, DegenerateVarianceError
from .estimators import GateEstimate

# Acklam's rational approximation to the normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF.

    The rational approximation is good to about 1e-9 relative; one Halley
    step against ``erfc`` brings it to double precision.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal_quantile needs 0 < p < 1, got {p!r}")
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    elif p <= 1 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    else:
        q = math.sqrt(-2 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    # Halley refinement; work in the lower tail to keep erfc accurate
    if x > 0:
        e = 0.5 * math.erfc(x / math.sqrt(2)) - (1 - p)
        u = -e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    else:
        e = 0.5 * math.erfc(-x / math.sqrt(2)) - p
        u = e * math.sqrt(2 * math.pi) * math.exp(x * x / 2)
    return x - u / (1 + x * u / 2)


def z_upper(alpha: float) -> float:
    """``z_alpha``: the ``1 - alpha`` quantile."""
    return normal_quantile(1.0 - alpha)


def asymptotic_power(mu_over_sigma: float, alpha: float) -> float:
    """Large-sample power of the two-sided level-``alpha`` Wald test."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    z = z_upper(alpha / 2)
    if math.isinf(mu_over_sigma):
        return 1.0
    return 1.0 - normal_cdf(mu_over_sigma + z) + normal_cdf(mu_over_sigma - z)


@dataclass(frozen=True)
class TestStatistic:
    __test__ = False  # keep pytest from collecting this class

    estimator_id: int
    group: int
    t_value: float
    se: float
    mu_offset: float = 0.0
    diff: float = 0.0  # tau_k - tau_0


def test_statistic(obs: GateEstimate, rct: GateEstimate, mu_offset: float = 0.0) -> TestStatistic:
    if obs.group != rct.group:
        raise ConfigError(f"comparing group {obs.group} against RCT group {rct.group}")
    s2 = obs.asym_var / obs.n_used + rct.asym_var / rct.n_used
    if not math.isfinite(s2):
        raise DegenerateVarianceError(f"group {obs.group}: non-finite test variance")
    if s2 <= 0:
        raise DegenerateVarianceError(
            f"estimator {obs.estimator_id}, group {obs.group}: zero test variance"
        )
    se = math.sqrt(s2)
    diff = obs.point - rct.point
    return TestStatistic(obs.estimator_id, obs.group, (diff - mu_offset) / se, se, mu_offset, diff)


test_statistic.__test__ = False


def falsification_threshold(alpha: float, i_r_size: int) -> float:
    if i_r_size < 1:
        raise ConfigError("need at least one validation group")
    return z_upper(alpha / (4 * i_r_size))


def gate_estimators(reports: Mapping[int, Sequence[TestStatistic]], alpha: float,
                    i_r_size: int) -> frozenset[int]:
    """Estimators whose every validation statistic stays within the threshold."""
    z = falsification_threshold(alpha, i_r_size)
    accepted = set()
    for k, stats in reports.items():
        if len(stats) != i_r_size:
            raise ConfigError(
                f"estimator {k} has {len(stats)} statistics for {i_r_size} validation groups"
            )
        if all(abs(s.t_value) <= z for s in stats):
            accepted.add(k)
    return frozenset(accepted)


@dataclass(frozen=True)
class FalsificationReport:
    statistics: dict  # estimator id -> list[TestStatistic]
    threshold: float
    alpha: float
    accepted: frozenset
    validation_groups: tuple = field(default=())

    @property
    def no_survivor(self) -> bool:
        return not self.accepted

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "threshold": self.threshold,
            "validation_groups": list(self.validation_groups),
            "accepted": sorted(self.accepted),
            "no_survivor": self.no_survivor,
            "tests": [asdict(s) for k in sorted(self.statistics) for s in self.statistics[k]],
        }

    @classmethod
    def from_dict(cls, d) -> "FalsificationReport":
        stats: dict = {}
        for row in d["tests"]:
            s = TestStatistic(**row)
            stats.setdefault(s.estimator_id, []).append(s)
        return cls(stats, float(d["threshold"]), float(d["alpha"]),
                   frozenset(int(k) for k in d["accepted"]),
                   tuple(int(i) for i in d.get("validation_groups", ())))

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def falsify(rct: Sequence[GateEstimate], estimators: Mapping[int, Sequence[GateEstimate]],
            alpha: float = 0.05) -> FalsificationReport:
    """Test every estimator against the trial on each validation group."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    rct_by_group = {e.group: e for e in rct}
    groups = tuple(sorted(rct_by_group))
    stats = {}
    for k, ests in estimators.items():
        by_group = {e.group: e for e in ests}
        missing = [i for i in groups if i not in by_group]
        if missing:
            raise ConfigError(f"estimator {k} lacks validation groups {missing}")
        stats[k] = [test_statistic(by_group[i], rct_by_group[i]) for i in groups]
    accepted = gate_estimators(stats, alpha, len(groups))
    return FalsificationReport(stats, falsification_threshold(alpha, len(groups)), alpha,
                               accepted, groups)
