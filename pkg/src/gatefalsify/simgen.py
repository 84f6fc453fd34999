"""Semi-synthetic trial + observational studies built on IHDP-shaped covariates.

Per replication:

1. The trial keeps the base covariate rows of married mothers, once each.
2. Each observational study resamples all base rows ``r`` times over, with
   weight ``0.8 ** (male + mother smoked + mother worked)``.
3. Treatment is Bernoulli(1/2) everywhere.  Confounders are drawn
   independently of treatment in the trial and conditionally on it in the
   studies, which is what creates confounding once they enter the outcome.
4. Potential outcomes follow a modified "response surface B"::

       Y_0 ~ N(exp((x0 + 1/2)' beta) + Z' gamma, 1)
       Y_1 ~ N(x1' beta + Z' gamma + omega, 1)

   where ``x_a = (a, X)`` is the covariate vector with the treatment slot
   set to ``a``.
5. Study ``k`` hides its ``c_z[k]`` highest-weighted confounders.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .data import Dataset, GroupSupport, assign_groups
from .errors import ConfigError, OracleError

log = logging.getLogger(__name__)

IHDP_CONTINUOUS = ("bw", "b.head", "preterm", "birth.o", "nnhealth", "momage")
IHDP_BINARY = (
    "sex", "twin", "b.marr", "mom.lths", "mom.hs", "mom.scoll", "cig", "first", "booze",
    "drugs", "work.dur", "prenatal", "ark", "ein", "har", "mia", "pen", "tex", "was",
    "momwhite", "momblack", "momhisp",
)
IHDP_COLUMNS = IHDP_CONTINUOUS + IHDP_BINARY
IHDP_N = 985

BETA_SUPPORT = (0.0, 0.1, 0.2, 0.3, 0.4)
BETA_PROBS = (0.6, 0.1, 0.1, 0.1, 0.1)
GAMMA_SUPPORT = (0.1, 0.2, 0.5, 0.75, 1.0)
SELECTION_BASE = 0.8
EXP_CLAMP = 50.0

RCT_GROUPS = (1, 3)  # LM, HM: married mothers only


@dataclass(frozen=True)
class DgpConfig:
    K: int = 5
    r: float = 10
    m_c: int = 4
    m_b: int = 3
    c_z: tuple = (0, 0, 2, 4, 6)
    alpha: float = 0.05
    omega: float = 23.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "c_z", tuple(int(c) for c in self.c_z))
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if len(self.c_z) != self.K:
            raise ConfigError(f"c_z has {len(self.c_z)} entries for K={self.K} studies")
        if any(c < 0 or c > self.m_c + self.m_b for c in self.c_z):
            raise ConfigError(f"each c_z entry must lie in 0..{self.m_c + self.m_b}")
        if self.r < 1:
            raise ConfigError(f"upsampling ratio must be >= 1, got {self.r}")
        if self.m_c < 0 or self.m_b < 0:
            raise ConfigError("confounder counts must be non-negative")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")

    @property
    def n_confounders(self) -> int:
        return self.m_c + self.m_b

    @property
    def biased_ids(self) -> frozenset[int]:
        """Estimator ids (1-based) of studies with hidden confounders."""
        return frozenset(k + 1 for k, c in enumerate(self.c_z) if c > 0)


# ------------------------------------------------------------ covariates


@dataclass(frozen=True)
class CovariateBase:
    """Base covariate rows plus the column roles the generator needs."""

    values: np.ndarray
    names: tuple
    male: str = "sex"
    smoked: str = "cig"
    worked: str = "work.dur"
    group_rule: tuple = (("bw", 0.0), ("b.marr", None))
    synthetic: bool = False

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise ConfigError(f"covariate base has no column {name!r}") from None

    def groups(self) -> np.ndarray:
        n = self.n
        ds = Dataset(self.values, np.zeros(n), np.zeros(n), np.zeros(n), covariate_names=self.names)
        return assign_groups(ds, self.group_rule).group


def synthetic_ihdp_covariates(n: int = IHDP_N, seed: int = 0) -> CovariateBase:
    """Stand-in for the IHDP covariate file: 6 N(0,1) and 22 Bernoulli(1/2) columns.

    Group roles: standardized ``bw >= 0`` is "high birth weight" and
    ``b.marr`` is the married indicator.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 985]))
    cont = rng.standard_normal((n, len(IHDP_CONTINUOUS)))
    binary = (rng.random((n, len(IHDP_BINARY))) < 0.5).astype(float)
    return CovariateBase(np.hstack([cont, binary]), IHDP_COLUMNS, synthetic=True)


def load_covariate_base(path, columns: Sequence[str] | None = None, male: str = "sex",
                        smoked: str = "cig", worked: str = "work.dur",
                        group_rule=(("bw", 2000.0), ("b.marr", None))) -> CovariateBase:
    """Read an IHDP covariate CSV (headed).  ``columns`` defaults to every column."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = list(reader)
    cols = list(columns) if columns is not None else header
    missing = [c for c in cols if c not in header]
    if missing:
        raise ConfigError(f"covariate file lacks columns {missing}")
    pos = [header.index(c) for c in cols]
    try:
        values = np.array([[float(r[j]) for j in pos] for r in rows])
    except ValueError as exc:
        raise ConfigError(f"non-numeric covariate in {path.name}: {exc}") from None
    if np.isnan(values).any():
        raise ConfigError(f"missing covariate values in {path.name}")
    base = CovariateBase(values, tuple(cols), male, smoked, worked,
                         tuple(tuple(r) for r in group_rule))
    selection_weights(base)  # fail fast on missing role columns
    base.groups()
    return base


def selection_weights(base: CovariateBase) -> np.ndarray:
    """``0.8 ** (male + smoked + worked)`` per base row."""
    count = base.column(base.male) + base.column(base.smoked) + base.column(base.worked)
    return SELECTION_BASE ** count


def resample_indices(base: CovariateBase, r: float, rng: np.random.Generator) -> np.ndarray:
    w = selection_weights(base)
    n = int(round(r * base.n))
    return rng.choice(base.n, size=n, replace=True, p=w / w.sum())


def resample_observational(base: CovariateBase, r: float, rng: np.random.Generator) -> np.ndarray:
    return base.values[resample_indices(base, r, rng)]


# ----------------------------------------------------------- confounders


def synthesize_confounders(n: int, A, m_c: int, m_b: int, is_rct: bool,
                           rng: np.random.Generator) -> np.ndarray:
    """Continuous columns first, then binary.

    Trial: continuous ~ .5 N(0,1) + .5 N(3,1), binary ~ Bern(.5).
    Study: continuous ~ (.25+.5A) N(3,1) + (.75-.5A) N(0,1), binary ~ Bern(.25+.5A).
    """
    if is_rct:
        p_high = np.full(n, 0.5)
    else:
        if A is None:
            raise ConfigError("observational confounders need the treatment vector")
        p_high = 0.25 + 0.5 * np.asarray(A, dtype=float)
    comp = rng.random((n, m_c)) < p_high[:, None]
    cont = rng.standard_normal((n, m_c)) + 3.0 * comp
    binary = (rng.random((n, m_b)) < p_high[:, None]).astype(float)
    return np.hstack([cont, binary])


def confounder_names(m_c: int, m_b: int) -> tuple[str, ...]:
    return tuple(f"zc{j + 1}" for j in range(m_c)) + tuple(f"zb{j + 1}" for j in range(m_b))


# -------------------------------------------------------------- outcomes


@dataclass(frozen=True)
class OutcomeParams:
    beta: np.ndarray  # length d + 1; beta[0] multiplies the treatment slot
    gamma: np.ndarray
    omega: float = 23.0

    def __post_init__(self):
        if not np.all(np.isin(self.beta, BETA_SUPPORT)):
            raise ConfigError("beta entries must come from {0, .1, .2, .3, .4}")
        if not np.all(np.isin(self.gamma, GAMMA_SUPPORT)):
            raise ConfigError("gamma entries must come from {.1, .2, .5, .75, 1}")

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "gamma": self.gamma.tolist(), "omega": self.omega}


def draw_outcome_params(d: int, m: int, rng: np.random.Generator, omega: float = 23.0
                        ) -> OutcomeParams:
    beta = rng.choice(BETA_SUPPORT, size=d + 1, p=BETA_PROBS)
    gamma = rng.choice(GAMMA_SUPPORT, size=m)
    return OutcomeParams(np.asarray(beta, float), np.asarray(gamma, float), float(omega))


def outcome_means(X, Z, params: OutcomeParams):
    """Noise-free ``(E[Y_0 | X, Z], E[Y_1 | X, Z])`` and the count of clamped exponents."""
    X = np.asarray(X, dtype=float)
    lin_x = X @ params.beta[1:]
    arg0 = 0.5 * params.beta[0] + (X + 0.5) @ params.beta[1:]
    clamped = int(np.sum(arg0 > EXP_CLAMP))
    zg = np.asarray(Z, dtype=float) @ params.gamma if params.gamma.size else 0.0
    m0 = np.exp(np.minimum(arg0, EXP_CLAMP)) + zg
    m1 = params.beta[0] + lin_x + zg + params.omega
    return m0, m1, clamped


class Outcomes(NamedTuple):
    y: np.ndarray
    y0: np.ndarray
    y1: np.ndarray


def simulate_outcomes(X, A, Z, params: OutcomeParams, rng: np.random.Generator) -> Outcomes:
    X = np.asarray(X, dtype=float)
    if X.shape[1] + 1 != len(params.beta):
        raise ConfigError(f"beta has {len(params.beta)} entries for {X.shape[1]} covariates")
    if np.asarray(Z).shape[1] != len(params.gamma):
        raise ConfigError("gamma length does not match the confounder count")
    m0, m1, clamped = outcome_means(X, Z, params)
    if clamped:
        log.warning("clamped %d exponent(s) of the control surface at %g", clamped, EXP_CLAMP)
    n = len(X)
    y0 = m0 + rng.standard_normal(n)
    y1 = m1 + rng.standard_normal(n)
    A = np.asarray(A)
    return Outcomes(np.where(A == 1, y1, y0), y0, y1)


def concealment_order(gamma) -> np.ndarray:
    """Confounder indices from highest to lowest weight (stable on ties)."""
    return np.argsort(-np.asarray(gamma), kind="stable")


def conceal(ds: Dataset, c_z: int, gamma, names: Sequence[str]) -> Dataset:
    """Drop the ``c_z`` highest-``gamma`` confounder columns (``names`` in gamma order)."""
    if not 0 <= c_z <= len(names):
        raise ConfigError(f"cannot conceal {c_z} of {len(names)} confounders")
    if c_z == 0:
        return ds
    hidden = {names[j] for j in concealment_order(gamma)[:c_z]}
    keep = [c for c in ds.covariate_names if c not in hidden]
    return ds.select_columns(keep)


# ---------------------------------------------------------- replication


@dataclass(frozen=True)
class SimulatedData:
    rct: Dataset
    obs: tuple
    params: OutcomeParams
    support: GroupSupport
    z_names: tuple


def _support() -> GroupSupport:
    return GroupSupport(frozenset(RCT_GROUPS), frozenset(set(range(4)) - set(RCT_GROUPS)), 4)


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def simulate(cfg: DgpConfig, base: CovariateBase, seed,
             params: OutcomeParams | None = None) -> SimulatedData:
    """One trial and ``cfg.K`` observational studies from an int or SeedSequence."""
    streams = [np.random.default_rng(s) for s in as_seed_sequence(seed).spawn(cfg.K + 2)]
    if params is None:
        params = draw_outcome_params(base.d, cfg.n_confounders, streams[0], cfg.omega)
    groups = base.groups()
    z_names = confounder_names(cfg.m_c, cfg.m_b)
    names = tuple(base.names) + z_names

    def build(idx, is_rct, s, source_id):
        n = len(idx)
        X = base.values[idx]
        A = (s.random(n) < 0.5).astype(np.int8)
        Z = synthesize_confounders(n, A, cfg.m_c, cfg.m_b, is_rct, s)
        out = simulate_outcomes(X, A, Z, params, s)
        return Dataset(np.hstack([X, Z]), A, out.y, groups[idx], source_id, 4, names)

    rct_idx = np.flatnonzero(np.isin(groups, RCT_GROUPS))
    rct = build(rct_idx, True, streams[1], 0)
    obs = []
    for k in range(cfg.K):
        s = streams[k + 2]
        ds = build(resample_indices(base, cfg.r, s), False, s, k + 1)
        obs.append(conceal(ds, cfg.c_z[k], params.gamma, z_names))
    return SimulatedData(rct, tuple(obs), params, _support(), z_names)


# --------------------------------------------------------------- truth


@dataclass(frozen=True)
class TruthTable:
    tau: dict
    mc_se: dict

    def to_dict(self) -> dict:
        return {"tau": {str(k): v for k, v in sorted(self.tau.items())},
                "mc_se": {str(k): v for k, v in sorted(self.mc_se.items())}}


def true_gate(cfg: DgpConfig, params: OutcomeParams, base: CovariateBase,
              n_oracle: int = 100_000, rng: np.random.Generator | None = None) -> TruthTable:
    """Monte Carlo GATEs: trial population for validation groups, study population otherwise."""
    if n_oracle < 100_000:
        raise OracleError(f"n_oracle must be >= 1e5, got {n_oracle}")
    rng = rng or np.random.default_rng(cfg.seed)
    groups = base.groups()
    support = _support()
    w = selection_weights(base)
    rct_rows = np.flatnonzero(np.isin(groups, RCT_GROUPS))
    populations = [
        (True, rng.choice(rct_rows, size=n_oracle), support.validation_groups),
        (False, rng.choice(base.n, size=n_oracle, p=w / w.sum()), support.extrapolated_groups),
    ]
    tau, se = {}, {}
    for is_rct, idx, targets in populations:
        X = base.values[idx]
        A = (rng.random(n_oracle) < 0.5).astype(np.int8)
        Z = synthesize_confounders(n_oracle, A, cfg.m_c, cfg.m_b, is_rct, rng)
        out = simulate_outcomes(X, A, Z, params, rng)
        diff = out.y1 - out.y0
        g = groups[idx]
        for i in sorted(targets):
            m = g == i
            if m.sum() < 2:
                raise OracleError(f"oracle draw has no rows in group {i}")
            tau[i] = float(diff[m].mean())
            se[i] = float(diff[m].std(ddof=1) / np.sqrt(m.sum()))
    return TruthTable(tau, se)


def exact_gate(params: OutcomeParams, base: CovariateBase) -> dict[int, float]:
    """Noise-free GATEs by exact averaging over the finite base rows."""
    groups = base.groups()
    support = _support()
    zero = np.zeros((base.n, len(params.gamma)))
    m0, m1, _ = outcome_means(base.values, zero, params)
    cate = m1 - m0
    w = selection_weights(base)
    out = {}
    for i in support.validation_groups:
        out[i] = float(cate[groups == i].mean())
    for i in support.extrapolated_groups:
        m = groups == i
        out[i] = float(np.sum(w[m] * cate[m]) / np.sum(w[m]))
    return out
