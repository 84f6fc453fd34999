"""Nuisance models and K-fold cross-fitting.

Outcome regressions use a small fully connected network trained with Adam
(full batch), or ridge regression in fast mode.  Propensity and selection
scores use L2-penalised logistic regression solved by IRLS.  All
probabilities leaving this module are clipped to ``[PROB_CLIP, 1 - PROB_CLIP]``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateFitError,
    DivergenceError,
    FoldDegeneracyError,
)

PROB_CLIP = 0.01

PENALTY_GRID = (1.0, 0.1, 0.01, 0.001)
MLP_ARCHITECTURES = ((100,), (50, 50), (25, 25))
MLP_ACTIVATIONS = ("relu", "tanh")
MLP_ALPHAS = (1.0, 0.1, 0.01, 0.001, 0.0001)
MLP_EPOCHS = (250, 500)
MLP_LEARNING_RATE = 0.001
RIDGE_ALPHAS = (1.0, 0.1, 0.01, 0.001, 0.0001)

IRLS_MAX_ITER = 100
IRLS_TOL = 1e-8

TARGETS = ("g1", "g0", "e1", "p")


def _seed(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))


def _standardize(X: np.ndarray):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return center, scale


def _val_split(n: int, val_fraction: float, rng: np.random.Generator, strata=None):
    """Random train/validation split; stratified on ``strata`` when given."""
    if strata is None:
        perm = rng.permutation(n)
        n_val = int(round(val_fraction * n))
        return np.sort(perm[n_val:]), np.sort(perm[:n_val])
    train, val = [], []
    for level in np.unique(strata):
        idx = np.flatnonzero(strata == level)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(val_fraction * len(idx)))
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


# ----------------------------------------------------------------- logistic


@dataclass(frozen=True)
class BinaryClassifierModel:
    weights: np.ndarray  # [bias, w_1..w_d] on the standardized scale
    penalty: float
    center: np.ndarray
    scale: np.ndarray
    n_iter: int = 0

    def decision_function(self, X) -> np.ndarray:
        Xs = (np.asarray(X, dtype=float) - self.center) / self.scale
        return self.weights[0] + Xs @ self.weights[1:]

    def predict_proba(self, X) -> np.ndarray:
        eta = self.decision_function(X)
        return np.clip(_sigmoid(eta), PROB_CLIP, 1.0 - PROB_CLIP)


def _sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log_loss(y, eta) -> float:
    # mean of log(1 + exp(eta)) - y * eta, computed stably
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta))


def irls(Xs: np.ndarray, y: np.ndarray, penalty: float, max_iter: int = IRLS_MAX_ITER,
         tol: float = IRLS_TOL):
    """Newton/IRLS for mean log-loss + penalty/2 * ||w||^2 (bias unpenalised).

    Returns ``(weights, n_iter)``.  Step halving guards the rare Newton
    overshoot on nearly separated data.
    """
    n, d = Xs.shape
    Z = np.hstack([np.ones((n, 1)), Xs])
    w = np.zeros(d + 1)
    ybar = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    w[0] = np.log(ybar / (1 - ybar))
    ridge = np.full(d + 1, penalty)
    ridge[0] = 0.0

    def objective(w):
        return _log_loss(y, Z @ w) + 0.5 * float(np.sum(ridge * w * w))

    obj = objective(w)
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        mu = _sigmoid(Z @ w)
        grad = Z.T @ (mu - y) / n + ridge * w
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < tol:
            return w, it - 1
        W = mu * (1 - mu)
        H = (Z.T * W) @ Z / n + np.diag(ridge)
        H[0, 0] += 1e-12
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            w_new = w - t * step
            obj_new = objective(w_new)
            if obj_new <= obj + 1e-14 or t < 1e-10:
                break
            t *= 0.5
        w, obj = w_new, obj_new
    mu = _sigmoid(Z @ w)
    grad_norm = float(np.linalg.norm(Z.T @ (mu - y) / n + ridge * w))
    if grad_norm < tol:
        return w, max_iter
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", grad_norm)


def _check_classes(y, where: str, minimum: int = 2):
    n1 = int(np.sum(y == 1))
    n0 = int(np.sum(y == 0))
    if n1 < minimum or n0 < minimum:
        raise DegenerateFitError(
            f"{where}: need >= {minimum} rows per class, have {n0} zeros and {n1} ones"
        )


def fit_logistic(X, y, penalty_grid: Sequence[float] = PENALTY_GRID, val_fraction: float = 0.2,
                 seed: int | np.random.Generator = 0) -> BinaryClassifierModel:
    """Select the L2 penalty by held-out log-loss, then refit on all rows."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if len(np.unique(y)) < 2:
        raise DegenerateFitError("single-class response; logistic fit is degenerate")
    rng = seed if isinstance(seed, np.random.Generator) else _seed(seed)
    grid = list(penalty_grid)
    if not grid or any(p <= 0 for p in grid):
        raise ConfigError(f"penalty grid must be non-empty and positive, got {grid}")

    best = grid[0]
    if len(grid) > 1:
        tr, va = _val_split(len(y), val_fraction, rng, strata=y)
        _check_classes(y[tr], "training portion")
        c, s = _standardize(X[tr])
        Xtr, Xva = (X[tr] - c) / s, (X[va] - c) / s
        best_loss = np.inf
        for pen in grid:
            w, _ = irls(Xtr, y[tr], pen)
            loss = _log_loss(y[va], w[0] + Xva @ w[1:])
            if loss < best_loss:
                best, best_loss = pen, loss
    _check_classes(y, "training rows", minimum=1)
    c, s = _standardize(X)
    w, it = irls((X - c) / s, y, best)
    return BinaryClassifierModel(weights=w, penalty=best, center=c, scale=s, n_iter=it)


# -------------------------------------------------------------- regressors


@dataclass(frozen=True)
class RegressorModel:
    """Fully connected network; ``weights`` holds ``(W, b)`` per layer."""

    architecture: tuple[int, ...]
    weights: tuple
    activation: str
    alpha: float
    epochs: int
    x_center: np.ndarray
    x_scale: np.ndarray
    y_center: float
    y_scale: float

    def predict(self, X) -> np.ndarray:
        Xs = (np.asarray(X, dtype=float) - self.x_center) / self.x_scale
        return self.y_center + self.y_scale * _forward(self.weights, self.activation, Xs)


@dataclass(frozen=True)
class RidgeModel:
    coef: np.ndarray
    intercept: float
    alpha: float
    x_center: np.ndarray
    x_scale: np.ndarray

    def predict(self, X) -> np.ndarray:
        Xs = (np.asarray(X, dtype=float) - self.x_center) / self.x_scale
        return self.intercept + Xs @ self.coef


def _act(name):
    if name == "relu":
        return (lambda z: np.maximum(z, 0.0)), (lambda z, h: (z > 0).astype(float))
    if name == "tanh":
        return np.tanh, (lambda z, h: 1.0 - h * h)
    raise ConfigError(f"unknown activation {name!r}")


def _forward(weights, activation, X):
    f, _ = _act(activation)
    h = X
    for W, b in weights[:-1]:
        h = f(h @ W + b)
    W, b = weights[-1]
    return h @ W[:, 0] + b[0]


def _init_weights(sizes, rng):
    # hidden layers: symmetric uniform in +-1/sqrt(fan_in); output layer starts at zero
    weights = []
    for j, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if j == len(sizes) - 2:
            W = np.zeros((fan_in, fan_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights.append([W, np.zeros(fan_out)])
    return weights


def train_mlp(X, y, architecture, activation, alpha, epochs: Sequence[int], rng,
              lr: float = MLP_LEARNING_RATE, X_val=None, y_val=None):
    """Full-batch Adam on 0.5*MSE + alpha/(2n)*||W||^2.

    ``X``/``y`` are already standardized.  Because training is deterministic
    and has no early stopping, the state after ``e`` epochs is the same for
    any longer run, so one run serves every epoch count in ``epochs``.
    Returns ``{epochs: (weights, val_mse)}``.
    """
    n = len(y)
    f, df = _act(activation)
    sizes = [X.shape[1], *architecture, 1]
    params = _init_weights(sizes, rng)
    m = [[np.zeros_like(W), np.zeros_like(b)] for W, b in params]
    v = [[np.zeros_like(W), np.zeros_like(b)] for W, b in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    checkpoints = set(int(e) for e in epochs)
    out = {}
    L = len(params)
    for t in range(1, max(checkpoints) + 1):
        zs, hs = [], [X]
        h = X
        for W, b in params[:-1]:
            z = h @ W + b
            h = f(z)
            zs.append(z)
            hs.append(h)
        W, b = params[-1]
        pred = h @ W[:, 0] + b[0]
        resid = pred - y
        if not np.all(np.isfinite(resid)):
            raise DivergenceError(f"non-finite loss at epoch {t}")
        delta = (resid / n)[:, None]
        grads = [None] * L
        for j in range(L - 1, -1, -1):
            W, b = params[j]
            gW = hs[j].T @ delta + (alpha / n) * W
            gb = delta.sum(axis=0)
            grads[j] = (gW, gb)
            if j > 0:
                delta = (delta @ W.T) * df(zs[j - 1], hs[j])
        c1 = 1 - b1 ** t
        c2 = 1 - b2 ** t
        for j in range(L):
            for q in range(2):
                g = grads[j][q]
                m[j][q] = b1 * m[j][q] + (1 - b1) * g
                v[j][q] = b2 * v[j][q] + (1 - b2) * g * g
                params[j][q] = params[j][q] - lr * (m[j][q] / c1) / (np.sqrt(v[j][q] / c2) + eps)
        if t in checkpoints:
            snap = tuple((W.copy(), b.copy()) for W, b in params)
            val = np.nan
            if X_val is not None:
                val = float(np.mean((_forward(snap, activation, X_val) - y_val) ** 2))
                if not np.isfinite(val):
                    raise DivergenceError(f"non-finite validation loss at epoch {t}")
            out[t] = (snap, val)
    return out


@dataclass(frozen=True)
class MLPGrid:
    architectures: tuple = MLP_ARCHITECTURES
    activations: tuple = MLP_ACTIVATIONS
    alphas: tuple = MLP_ALPHAS
    epochs: tuple = MLP_EPOCHS


def fit_regressor(X, y, grid: MLPGrid | None = None, val_fraction: float = 0.2,
                  seed: int | np.random.Generator = 0) -> RegressorModel:
    """Grid-search a network by validation MSE and refit the winner on all rows."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if len(y) < 10:
        raise DegenerateFitError(f"regressor needs n >= 10 rows, got {len(y)}")
    grid = grid or MLPGrid()
    rng = seed if isinstance(seed, np.random.Generator) else _seed(seed)
    init_seed = int(rng.integers(2**31))

    configs = list(itertools.product(grid.architectures, grid.activations, grid.alphas))
    best = (configs[0], max(grid.epochs))
    if len(configs) > 1 or len(grid.epochs) > 1:
        tr, va = _val_split(len(y), val_fraction, rng)
        xc, xs = _standardize(X[tr])
        yc, ys = float(y[tr].mean()), float(y[tr].std()) or 1.0
        Xtr, Xva = (X[tr] - xc) / xs, (X[va] - xc) / xs
        ytr, yva = (y[tr] - yc) / ys, (y[va] - yc) / ys
        best_mse = np.inf
        for c_idx, (arch, act, alpha) in enumerate(configs):
            runs = train_mlp(Xtr, ytr, arch, act, alpha, grid.epochs, _seed(init_seed, c_idx),
                             X_val=Xva, y_val=yva)
            for ep in sorted(runs):
                mse = runs[ep][1]
                if mse < best_mse:
                    best, best_mse = ((arch, act, alpha), ep), mse
    (arch, act, alpha), ep = best
    xc, xs = _standardize(X)
    yc, ys = float(y.mean()), float(y.std()) or 1.0
    runs = train_mlp((X - xc) / xs, (y - yc) / ys, arch, act, alpha, (ep,),
                     _seed(init_seed, configs.index((arch, act, alpha))))
    return RegressorModel(
        architecture=tuple(arch), weights=runs[ep][0], activation=act, alpha=alpha, epochs=ep,
        x_center=xc, x_scale=xs, y_center=yc, y_scale=ys,
    )


def _ridge_solve(Xs, yc, alpha):
    n, d = Xs.shape
    return np.linalg.solve(Xs.T @ Xs / n + alpha * np.eye(d), Xs.T @ yc / n)


def fit_ridge(X, y, alphas: Sequence[float] = RIDGE_ALPHAS, val_fraction: float = 0.2,
              seed: int | np.random.Generator = 0) -> RidgeModel:
    """Fast-mode stand-in for :func:`fit_regressor` (mean squared error + alpha*||w||^2)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if len(y) < 10:
        raise DegenerateFitError(f"regressor needs n >= 10 rows, got {len(y)}")
    rng = seed if isinstance(seed, np.random.Generator) else _seed(seed)
    best = alphas[0]
    if len(alphas) > 1:
        tr, va = _val_split(len(y), val_fraction, rng)
        c, s = _standardize(X[tr])
        Xtr, Xva = (X[tr] - c) / s, (X[va] - c) / s
        ym = y[tr].mean()
        best_mse = np.inf
        for a in alphas:
            coef = _ridge_solve(Xtr, y[tr] - ym, a)
            mse = float(np.mean((ym + Xva @ coef - y[va]) ** 2))
            if mse < best_mse:
                best, best_mse = a, mse
    c, s = _standardize(X)
    ym = float(y.mean())
    coef = _ridge_solve((X - c) / s, y - ym, best)
    return RidgeModel(coef=coef, intercept=ym, alpha=best, x_center=c, x_scale=s)


# ------------------------------------------------------------ cross-fitting


@dataclass(frozen=True)
class NuisanceConfig:
    """Model choices for every nuisance fit.  ``fast`` swaps the network for ridge."""

    fast: bool = False
    folds: int = 3
    val_fraction: float = 0.2
    penalty_grid: tuple = PENALTY_GRID
    mlp_grid: MLPGrid = field(default_factory=MLPGrid)
    ridge_alphas: tuple = RIDGE_ALPHAS

    def fit_outcome(self, X, y, seed):
        if self.fast:
            return fit_ridge(X, y, self.ridge_alphas, self.val_fraction, seed)
        return fit_regressor(X, y, self.mlp_grid, self.val_fraction, seed)

    def fit_binary(self, X, y, seed):
        return fit_logistic(X, y, self.penalty_grid, self.val_fraction, seed)


@dataclass(frozen=True)
class CrossFitPlan:
    n: int
    folds: tuple
    seed: int

    def __post_init__(self):
        allidx = np.sort(np.concatenate(self.folds)) if self.folds else np.array([], int)
        if len(allidx) != self.n or np.any(allidx != np.arange(self.n)):
            raise ConfigError("cross-fit folds must partition 0..n-1")

    @property
    def K(self) -> int:
        return len(self.folds)

    def complement(self, m: int) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.folds[m]] = False
        return np.flatnonzero(mask)


def make_crossfit_plan(n: int, K: int = 3, seed: int = 0) -> CrossFitPlan:
    if K < 2:
        raise ConfigError(f"need K >= 2 folds, got {K}")
    if n < K:
        raise ConfigError(f"cannot split n={n} rows into K={K} folds")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0FF])).permutation(n)
    # contiguous chunks of a random permutation: sizes differ by at most one
    folds = tuple(np.sort(chunk) for chunk in np.array_split(perm, K))
    return CrossFitPlan(n=n, folds=folds, seed=int(seed))


def crossfit_predict(X, treatment, outcome, plan: CrossFitPlan, targets: Iterable[str],
                     selection=None, config: NuisanceConfig | None = None) -> dict:
    """Out-of-fold nuisance predictions for every row.

    Targets:

    * ``g1``/``g0`` -- E[Y | A=a, X] (restricted to ``selection == 1`` rows if given)
    * ``e1`` -- P(A=1 | X) (on ``selection == 1`` rows if given)
    * ``p``  -- P(S=1 | X); requires ``selection``

    Each row's prediction comes from models trained on the other folds only.
    """
    config = config or NuisanceConfig()
    X = np.asarray(X, dtype=float)
    A = np.asarray(treatment)
    Y = np.asarray(outcome, dtype=float)
    S = None if selection is None else np.asarray(selection)
    targets = list(targets)
    for t in targets:
        if t not in TARGETS:
            raise ConfigError(f"unknown nuisance target {t!r}")
    if "p" in targets and S is None:
        raise ConfigError("selection score 'p' requires a selection indicator")
    if plan.n != len(Y):
        raise ConfigError(f"plan covers {plan.n} rows but data has {len(Y)}")

    preds = {t: np.full(len(Y), np.nan) for t in targets}
    src = np.ones(len(Y), dtype=bool) if S is None else (S == 1)
    for m in range(plan.K):
        test = plan.folds[m]
        train = plan.complement(m)
        for t in targets:
            rng = _seed(plan.seed, m, TARGETS.index(t))
            if t in ("g1", "g0"):
                arm = 1 if t == "g1" else 0
                rows = train[src[train] & (A[train] == arm)]
                if len(rows) < 10:
                    raise FoldDegeneracyError(
                        f"fold {m}: only {len(rows)} training rows with A={arm} for {t}"
                    )
                model = config.fit_outcome(X[rows], Y[rows], rng)
                preds[t][test] = model.predict(X[test])
            elif t == "e1":
                rows = train[src[train]]
                _fold_classes(A[rows], m, "treatment arm")
                preds[t][test] = config.fit_binary(X[rows], A[rows], rng).predict_proba(X[test])
            else:
                _fold_classes(S[train], m, "selection class")
                preds[t][test] = config.fit_binary(X[train], S[train], rng).predict_proba(X[test])
    return preds


def _fold_classes(y, m, what):
    n1 = int(np.sum(y == 1))
    n0 = int(np.sum(y == 0))
    if min(n0, n1) < 2:
        raise FoldDegeneracyError(
            f"fold {m}: training complement has {n0}/{n1} rows per {what}"
        )
