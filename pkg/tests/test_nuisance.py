import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from gatefalsify import nuisance as nz
from gatefalsify.errors import (
    ConfigError,
    ConvergenceError,
    DegenerateFitError,
    DivergenceError,
    FoldDegeneracyError,
)
from gatefalsify.nuisance import (
    PENALTY_GRID,
    PROB_CLIP,
    CrossFitPlan,
    MLPGrid,
    NuisanceConfig,
    crossfit_predict,
    fit_logistic,
    fit_regressor,
    fit_ridge,
    irls,
    make_crossfit_plan,
    train_mlp,
)


def test_default_grids():
    assert PENALTY_GRID == (1.0, 0.1, 0.01, 0.001)
    g = MLPGrid()
    assert g.architectures == ((100,), (50, 50), (25, 25))
    assert g.activations == ("relu", "tanh")
    assert g.alphas == (1.0, 0.1, 0.01, 0.001, 0.0001)
    assert g.epochs == (250, 500)
    assert nz.MLP_LEARNING_RATE == 0.001
    assert NuisanceConfig().folds == 3


# ------------------------------------------------------------- logistic


@pytest.mark.parametrize("penalty", [1.0, 0.01])
def test_irls_matches_generic_optimizer(rng, penalty):
    X = rng.standard_normal((400, 3))
    y = (rng.random(400) < 1 / (1 + np.exp(-(0.3 + X @ [1.0, -2.0, 0.5])))).astype(float)
    w, _ = irls(X, y, penalty)

    def objective(v):
        eta = v[0] + X @ v[1:]
        return np.mean(np.logaddexp(0, eta) - y * eta) + 0.5 * penalty * v[1:] @ v[1:]

    ref = minimize(objective, np.zeros(4), method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(w, ref.x, atol=1e-5)


def test_separated_data_stays_inside_unit_interval():
    X = np.linspace(-3, 3, 60)[:, None]
    y = (X[:, 0] > 0).astype(float)
    model = fit_logistic(X, y, penalty_grid=(1.0,))
    p = model.predict_proba(np.array([[-100.0], [0.0], [100.0]]))
    assert np.all((p > 0) & (p < 1))
    assert np.all((p >= PROB_CLIP) & (p <= 1 - PROB_CLIP))


def test_null_model_recovers_intercept(rng):
    n = 10_000
    X = rng.standard_normal((n, 1))
    y = (rng.random(n) < 0.3).astype(float)
    model = fit_logistic(X, y, seed=1)
    # slope on the raw scale
    slope = model.weights[1] / model.scale[0]
    assert abs(slope) < 0.05
    intercept = model.weights[0] - slope * model.center[0]
    assert intercept == pytest.approx(np.log(y.mean() / (1 - y.mean())), abs=0.02)


def test_single_class_is_degenerate():
    with pytest.raises(DegenerateFitError):
        fit_logistic(np.zeros((10, 1)), np.ones(10))


def test_non_convergence_reports_gradient(rng):
    X = rng.standard_normal((200, 2))
    y = (X[:, 0] > 0).astype(float)
    with pytest.raises(ConvergenceError) as info:
        irls(X, y, 1e-6, max_iter=1)
    assert info.value.grad_norm > 0


def test_bad_penalty_grid():
    with pytest.raises(ConfigError):
        fit_logistic(np.arange(10.0), np.arange(10) % 2, penalty_grid=())


# ----------------------------------------------------------- regressors


SMALL_GRID = MLPGrid(architectures=((25, 25),), activations=("tanh",), alphas=(0.0001,),
                     epochs=(250, 500))


def test_constant_target(rng):
    X = rng.standard_normal((50, 3))
    model = fit_regressor(X, np.full(50, 4.2), SMALL_GRID)
    np.testing.assert_allclose(model.predict(X), 4.2, atol=1e-3)


def test_tanh_net_fits_linear_target(rng):
    n = 2000
    X = rng.standard_normal((n, 4))
    y = X @ [1.0, -0.5, 2.0, 0.0] + 3.0 + 0.1 * rng.standard_normal(n)
    Xtr, Xva, ytr, yva = X[:1600], X[1600:], y[:1600], y[1600:]
    model = fit_regressor(Xtr, ytr, MLPGrid(((100,),), ("tanh",), (0.0001,), (500,)))
    # oracle: exact least-squares fit
    D = np.column_stack([np.ones(1600), Xtr])
    coef = np.linalg.lstsq(D, ytr, rcond=None)[0]
    ols = np.column_stack([np.ones(400), Xva]) @ coef
    r2 = 1 - np.mean((model.predict(Xva) - yva) ** 2) / np.var(yva)
    r2_ols = 1 - np.mean((ols - yva) ** 2) / np.var(yva)
    assert r2 > 0.95
    assert r2 <= r2_ols + 1e-3


def test_nan_loss_diverges(rng):
    X = rng.standard_normal((20, 2))
    y = rng.standard_normal(20)
    y[3] = np.nan
    with pytest.raises(DivergenceError):
        train_mlp(X, y, (5,), "relu", 0.01, (10,), rng)


def test_regressor_needs_ten_rows():
    with pytest.raises(DegenerateFitError):
        fit_regressor(np.zeros((9, 1)), np.zeros(9), SMALL_GRID)
    with pytest.raises(DegenerateFitError):
        fit_ridge(np.zeros((9, 1)), np.zeros(9))


def test_ridge_matches_closed_form(rng):
    X = rng.standard_normal((300, 3))
    y = X @ [1.0, 2.0, -1.0] + rng.standard_normal(300)
    model = fit_ridge(X, y, alphas=(0.1,))
    Xs = (X - X.mean(0)) / X.std(0)
    ref = np.linalg.solve(Xs.T @ Xs / 300 + 0.1 * np.eye(3), Xs.T @ (y - y.mean()) / 300)
    np.testing.assert_allclose(model.coef, ref, rtol=1e-10)


def test_regressor_is_deterministic(rng):
    X = rng.standard_normal((60, 2))
    y = np.sin(X[:, 0])
    grid = MLPGrid(((25, 25),), ("relu", "tanh"), (0.01,), (250,))
    a = fit_regressor(X, y, grid, seed=3).predict(X)
    b = fit_regressor(X, y, grid, seed=3).predict(X)
    assert a.tobytes() == b.tobytes()


# --------------------------------------------------------- cross-fitting


def test_plan_of_nine():
    plan = make_crossfit_plan(9, 3, seed=4)
    assert [len(f) for f in plan.folds] == [3, 3, 3]
    again = make_crossfit_plan(9, 3, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(plan.folds, again.folds))


def test_plan_errors():
    with pytest.raises(ConfigError):
        make_crossfit_plan(2, 3)
    with pytest.raises(ConfigError):
        make_crossfit_plan(10, 1)
    with pytest.raises(ConfigError):
        CrossFitPlan(4, (np.array([0, 1]), np.array([1, 2])), 0)


@given(st.integers(2, 500), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_plan_partitions_rows(n, K, seed):
    if n < K:
        return
    plan = make_crossfit_plan(n, K, seed)
    allidx = np.sort(np.concatenate(plan.folds))
    np.testing.assert_array_equal(allidx, np.arange(n))
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1


class RecordingConfig(NuisanceConfig):
    """Records the training-set size of every fit."""

    def __init__(self):
        super().__init__(fast=True)
        object.__setattr__(self, "sizes", [])

    def fit_outcome(self, X, y, seed):
        self.sizes.append(len(y))
        return super().fit_outcome(X, y, seed)

    def fit_binary(self, X, y, seed):
        self.sizes.append(len(y))
        return super().fit_binary(X, y, seed)


def test_every_row_predicted_once_by_other_folds(rng):
    n = 30
    X = rng.standard_normal((n, 2))
    A = np.arange(n) % 2
    S = (np.arange(n) // 2) % 2
    plan = make_crossfit_plan(n, 3, seed=0)
    cfg = RecordingConfig()
    out = crossfit_predict(X, A, X[:, 0], plan, ("p",), selection=S, config=cfg)
    assert not np.isnan(out["p"]).any()
    assert cfg.sizes == [n - n // 3] * 3


def test_training_complement_excludes_test_rows(rng):
    # a prediction that used its own row would see a perfectly informative feature
    n = 60
    X = rng.standard_normal((n, 1))
    A = np.arange(n) % 2
    X = np.column_stack([X, A])  # treatment leaks through column 1
    plan = make_crossfit_plan(n, 3, seed=2)
    out = crossfit_predict(X, A, np.zeros(n), plan, ("e1",), config=NuisanceConfig(fast=True))
    assert np.all((out["e1"] >= PROB_CLIP) & (out["e1"] <= 1 - PROB_CLIP))


def test_leave_one_out_matches_per_row_refit(rng):
    n = 20
    X = rng.standard_normal((n, 2))
    A = (X[:, 0] + rng.standard_normal(n) > 0).astype(int)
    plan = CrossFitPlan(n, tuple(np.array([i]) for i in range(n)), seed=9)
    cfg = NuisanceConfig(fast=True)
    out = crossfit_predict(X, A, np.zeros(n), plan, ("e1",), config=cfg)
    for i in range(n):
        keep = np.arange(n) != i
        model = fit_logistic(X[keep], A[keep], seed=np.random.default_rng(
            np.random.SeedSequence([9, i, 2])))
        assert out["e1"][i] == model.predict_proba(X[i:i + 1])[0]


def test_known_constant_selection_score(rng):
    n = 5000
    X = rng.standard_normal((n, 5))
    S = (rng.random(n) < 0.5).astype(int)
    A = (rng.random(n) < 0.5).astype(int)
    plan = make_crossfit_plan(n, 3, seed=1)
    out = crossfit_predict(X, A, np.zeros(n), plan, ("p",), selection=S,
                           config=NuisanceConfig(fast=True))
    assert np.mean(np.abs(out["p"] - 0.5)) < 0.05


def test_fold_missing_an_arm(rng):
    n = 30
    X = rng.standard_normal((n, 1))
    A = np.zeros(n, int)
    A[:2] = 1
    plan = CrossFitPlan(n, (np.arange(0, 10), np.arange(10, 20), np.arange(20, 30)), 0)
    with pytest.raises(FoldDegeneracyError):
        crossfit_predict(X, A, X[:, 0], plan, ("e1",), config=NuisanceConfig(fast=True))
    with pytest.raises(FoldDegeneracyError):
        crossfit_predict(X, A, X[:, 0], plan, ("g1",), config=NuisanceConfig(fast=True))


def test_crossfit_is_deterministic(rng):
    n = 200
    X = rng.standard_normal((n, 3))
    A = (rng.random(n) < 0.5).astype(int)
    Y = X[:, 0] + A
    plan = make_crossfit_plan(n, 3, seed=5)
    cfg = NuisanceConfig(fast=True)
    a = crossfit_predict(X, A, Y, plan, ("g1", "g0", "e1"), config=cfg)
    b = crossfit_predict(X, A, Y, plan, ("g1", "g0", "e1"), config=cfg)
    for t in a:
        assert a[t].tobytes() == b[t].tobytes()


def test_unknown_target_and_missing_selection():
    plan = make_crossfit_plan(12, 3)
    with pytest.raises(ConfigError):
        crossfit_predict(np.zeros((12, 1)), np.arange(12) % 2, np.zeros(12), plan, ("q",))
    with pytest.raises(ConfigError):
        crossfit_predict(np.zeros((12, 1)), np.arange(12) % 2, np.zeros(12), plan, ("p",))
