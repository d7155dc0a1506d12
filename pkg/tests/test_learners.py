import numpy as np
import pytest
import statsmodels.api as sm

import demandml as dm
from demandml.errors import ConfigError, DataError
from demandml.learners import (
    LAGS_X_SIMILARITIES,
    LearnerSpec,
    TreeEnsemble,
    expand_interactions,
    fit,
    predict,
    r2_score,
)


def linear_data(n=120, p=4, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    beta = np.arange(1, p + 1, dtype=float)
    y = 0.7 + X @ beta + noise * rng.standard_normal(n)
    return X, y, beta


class TestLinear:
    def test_exact_interpolation(self):
        X, y, beta = linear_data()
        model = fit(LearnerSpec(kind="linear"), X, y)
        assert np.abs(y - model.predict(X)).max() < 1e-8
        assert model.coef[0] == pytest.approx(0.7, abs=1e-8)
        assert np.allclose(model.coef[1:], beta, atol=1e-8)

    def test_constant_target(self):
        X, _, _ = linear_data()
        model = fit(LearnerSpec(kind="linear"), X, np.full(len(X), 3.25))
        assert model.coef[0] == pytest.approx(3.25, abs=1e-10)
        assert np.allclose(model.coef[1:], 0.0, atol=1e-10)

    def test_matches_statsmodels(self):
        X, y, _ = linear_data(noise=0.5, seed=3)
        model = fit(LearnerSpec(kind="linear"), X, y)
        ref = sm.OLS(y, sm.add_constant(X)).fit()
        assert np.allclose(model.coef, ref.params, atol=1e-10)

    def test_residual_orthogonality(self):
        X, y, _ = linear_data(n=300, seed=4, noise=1.0)
        Xs = (X - X.mean(0)) / X.std(0)
        model = fit(LearnerSpec(kind="linear"), Xs, y)
        resid = y - model.predict(Xs)
        assert np.abs(Xs.T @ resid).max() < 1e-6 * len(y)

    def test_rank_deficient_drops_and_reports(self):
        X, y, _ = linear_data(n=60, p=3, seed=5, noise=0.1)
        X_dup = np.column_stack([X, X[:, 1]])  # duplicate column
        model = fit(LearnerSpec(kind="linear"), X_dup, y,
                    names=("a", "b", "c", "b_copy"))
        assert len(model.dropped) == 1
        assert model.dropped[0] in ("b", "b_copy")
        # fit quality unharmed by the drop
        clean = fit(LearnerSpec(kind="linear"), X, y)
        assert np.allclose(model.predict(X_dup), clean.predict(X), atol=1e-8)

    def test_needs_more_rows_than_columns(self):
        X = np.ones((3, 5))
        with pytest.raises(DataError, match="n > p"):
            fit(LearnerSpec(kind="linear"), X, np.ones(3))


class TestInteractions:
    def test_lag_similarity_rule_counts(self):
        names = ("q_lag", "p_lag") + tuple(f"sim_{k}" for k in range(5))
        X = np.random.default_rng(6).standard_normal((10, 7))
        out, out_names = expand_interactions(X, names, LAGS_X_SIMILARITIES)
        assert out.shape[1] == 7 + 10
        assert out_names[7] == "q_lag×sim_0"
        assert out_names[-1] == "p_lag×sim_4"

    def test_zero_column_zero_interactions(self):
        X = np.array([[0.0, 2.0], [0.0, 3.0]])
        out, names = expand_interactions(X, ("a", "b"), [("a", "b")])
        assert np.all(out[:, 2] == 0.0)

    def test_product_values(self):
        X = np.array([[2.0, 0.5]])
        out, names = expand_interactions(X, ("p_lag", "cs1"),
                                         [("p_lag", "cs1")])
        assert out[0, 2] == 1.0
        assert names[2] == "p_lag×cs1"

    def test_unknown_column_errors(self):
        with pytest.raises(ConfigError, match="unknown column"):
            expand_interactions(np.ones((2, 1)), ("a",), [("a", "zzz")])

    def test_commutes_with_row_permutation(self):
        X = np.random.default_rng(7).standard_normal((20, 3))
        perm = np.random.default_rng(8).permutation(20)
        a, _ = expand_interactions(X, ("x", "y", "z"), [("x", "z")])
        b, _ = expand_interactions(X[perm], ("x", "y", "z"), [("x", "z")])
        assert np.array_equal(a[perm], b)

    def test_interactions_learner_fits_product_surface(self):
        rng = np.random.default_rng(9)
        n = 400
        X = rng.standard_normal((n, 4))
        names = ("q_lag", "p_lag", "sim_0", "sim_1")
        y = 1.0 + X[:, 0] * X[:, 2] - 2.0 * X[:, 1] * X[:, 3]
        model = fit(LearnerSpec(kind="linear_interactions"), X, y, names=names)
        assert np.abs(y - model.predict(X)).max() < 1e-8


class TestBoostedTrees:
    def test_step_function(self):
        rng = np.random.default_rng(10)
        x = rng.uniform(-1, 1, size=400)
        y = (x > 0).astype(float)
        spec = LearnerSpec(kind="boosted_trees", n_trees=200,
                           learning_rate=0.1, max_depth=1,
                           min_samples_leaf=5, subsample=1.0, seed=0)
        model = fit(spec, x[:, None], y)
        mse = float(((y - model.predict(x[:, None])) ** 2).mean())
        assert mse < 0.01

    def test_constant_target_predicts_constant(self):
        X = np.random.default_rng(11).standard_normal((80, 3))
        y = np.full(80, -1.5)
        spec = LearnerSpec(kind="boosted_trees", n_trees=10,
                           min_samples_leaf=5, seed=1)
        model = fit(spec, X, y)
        assert np.allclose(model.predict(X), -1.5, atol=1e-12)

    def test_zero_stage_ensemble_predicts_mean(self):
        n_nodes = 0
        ens = TreeEnsemble(init=2.5, learning_rate=0.1,
                           feature=np.zeros((0, 7), dtype=np.int64),
                           threshold=np.zeros((0, 7)),
                           value=np.zeros((0, 7)))
        assert np.all(ens.predict(np.ones((4, 3))) == 2.5)

    def test_hand_built_two_leaf_ensemble(self):
        # tree 1: x0 <= 0 -> -2 else +2 ; tree 2: x1 <= 1 -> 1 else 3
        leaf = -1
        t1 = dict(feature=[0, leaf, leaf], threshold=[0.0, 0.0, 0.0],
                  value=[0.0, -2.0, 2.0])
        t2 = dict(feature=[1, leaf, leaf], threshold=[1.0, 0.0, 0.0],
                  value=[0.0, 1.0, 3.0])
        ens = TreeEnsemble(
            init=1.0, learning_rate=0.5,
            feature=np.array([t1["feature"], t2["feature"]], dtype=np.int64),
            threshold=np.array([t1["threshold"], t2["threshold"]]),
            value=np.array([t1["value"], t2["value"]]))
        X = np.array([[-1.0, 0.0],   # 1.0 + .5*(-2) + .5*1 = 0.5
                      [3.0, 2.0],    # 1.0 + .5*(+2) + .5*3 = 3.5
                      [0.0, 1.0]])   # boundary goes left twice -> 0.5
        assert ens.predict(X).tolist() == [0.5, 3.5, 0.5]

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(12)
        X = rng.standard_normal((300, 4))
        y = X[:, 0] ** 2 + rng.standard_normal(300)
        spec = LearnerSpec(kind="boosted_trees", n_trees=40,
                           min_samples_leaf=5, seed=7)
        a = fit(spec, X, y).predict(X)
        b = fit(spec, X, y).predict(X)
        assert np.array_equal(a, b)
        c = fit(LearnerSpec(kind="boosted_trees", n_trees=40,
                            min_samples_leaf=5, seed=8), X, y).predict(X)
        assert not np.array_equal(a, c)

    def test_training_loss_non_increasing_full_sample(self):
        rng = np.random.default_rng(13)
        X = rng.standard_normal((250, 3))
        y = np.sin(X[:, 0]) + 0.5 * rng.standard_normal(250)
        spec = LearnerSpec(kind="boosted_trees", n_trees=60,
                           min_samples_leaf=5, subsample=1.0, seed=2)
        model = fit(spec, X, y)
        losses = model.ensemble.train_losses
        assert np.all(np.diff(losses) <= 1e-12)

    def test_respects_min_leaf(self):
        rng = np.random.default_rng(14)
        X = rng.standard_normal((100, 2))
        y = rng.standard_normal(100)
        spec = LearnerSpec(kind="boosted_trees", n_trees=5, max_depth=2,
                           min_samples_leaf=40, subsample=1.0, seed=3)
        model = fit(spec, X, y)
        # with min_leaf 40 of 100 rows, only the root can split once
        feat = model.ensemble.feature
        assert np.all(feat[:, 3:] == -1)

    def test_too_few_rows(self):
        with pytest.raises(DataError, match="min_samples_leaf"):
            fit(LearnerSpec(kind="boosted_trees", min_samples_leaf=20),
                np.ones((10, 2)), np.ones(10))


class TestPredict:
    def test_exact_fit_round_trip(self):
        X, y, _ = linear_data(seed=15)
        model = fit(LearnerSpec(kind="linear"), X, y)
        assert np.abs(predict(model, X) - y).max() < 1e-8

    def test_pure_function(self):
        X, y, _ = linear_data(seed=16, noise=0.3)
        spec = LearnerSpec(kind="boosted_trees", n_trees=20,
                           min_samples_leaf=5, seed=4)
        model = fit(spec, X, y)
        assert np.array_equal(predict(model, X), predict(model, X))

    def test_dimension_mismatch(self):
        X, y, _ = linear_data()
        model = fit(LearnerSpec(kind="linear"), X, y)
        with pytest.raises(DataError):
            predict(model, X[:, :2])


class TestR2:
    def test_perfect(self):
        y = np.array([1.0, 2.0, 3.0])
        assert r2_score(y, y) == 1.0

    def test_mean_predictor_zero(self):
        y = np.array([1.0, 2.0, 3.0])
        assert r2_score(y, np.full(3, 2.0)) == 0.0

    def test_worse_than_mean_negative(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        yhat = np.array([4.0, 3.0, 2.0, 1.0])
        assert r2_score(y, yhat) < 0.0

    def test_constant_y_undefined(self):
        with pytest.raises(DataError, match="constant"):
            r2_score(np.ones(5), np.zeros(5))


class TestSpecValidation:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            LearnerSpec(kind="svm")

    def test_bad_tree_params(self):
        with pytest.raises(ConfigError):
            LearnerSpec(kind="boosted_trees", n_trees=0)
        with pytest.raises(ConfigError):
            LearnerSpec(kind="boosted_trees", learning_rate=1.5)
        with pytest.raises(ConfigError):
            LearnerSpec(kind="boosted_trees", subsample=0.0)
