import numpy as np
import pytest
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score

import demandml as dm
from demandml.errors import ConfigError
from demandml.simulator import _eval_signal

from helpers_dgp import HET_SPEC, TRUE_ALPHA, hetero_config, homog_config


class TestEmbeddings:
    def test_unit_norms(self):
        emb, labels, cents = dm.simulate_embeddings(homog_config(n_products=200))
        assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-12)
        assert np.allclose(np.linalg.norm(cents, axis=1), 1.0, atol=1e-12)

    def test_zero_noise_equals_centroid(self):
        cfg = homog_config(n_products=50)
        cfg = dm.SemConfig(**{**cfg.__dict__, "embedding_noise": 0.0})
        emb, labels, cents = dm.simulate_embeddings(cfg)
        cos = np.einsum("ij,ij->i", emb, cents[labels])
        assert np.allclose(cos, 1.0, atol=1e-12)

    def test_centroid_separation(self):
        _, _, cents = dm.simulate_embeddings(homog_config(n_products=100))
        gram = cents @ cents.T
        off = gram[~np.eye(5, dtype=bool)]
        assert off.max() < 0.5

    def test_balanced_labels(self):
        _, labels, _ = dm.simulate_embeddings(homog_config(n_products=103))
        counts = np.bincount(labels, minlength=5)
        assert counts.max() - counts.min() <= 1

    def test_kmeans_oracle_recovers_clusters(self):
        # independent clustering oracle on generated data (K=5, d=64, noise .3)
        emb, labels, _ = dm.simulate_embeddings(homog_config(n_products=600))
        pred = KMeans(n_clusters=5, n_init=10, random_state=0).fit_predict(emb)
        assert adjusted_rand_score(labels, pred) >= 0.9

    def test_rejection_budget_exhaustion_errors(self, monkeypatch):
        import demandml.simulator as sim
        monkeypatch.setattr(sim, "_CENTROID_TRIES_PER_DIRECTION", 0)
        with pytest.raises(ConfigError, match="embedding_dim"):
            dm.simulate_embeddings(homog_config(n_products=50))

    def test_more_clusters_than_products_rejected(self):
        with pytest.raises(ConfigError, match="n_products"):
            dm.simulate_embeddings(homog_config(n_products=3))


class TestSimulate:
    def test_degenerate_homogeneous_truth(self):
        panel, truth = dm.simulate(homog_config(n_products=40, alpha0=-0.54))
        assert np.all(truth.a == -0.54)
        assert np.all(truth.cace == -0.54)
        assert truth.ace == -0.54

    def test_noiseless_heterogeneous_is_exact(self):
        cfg = hetero_config(n_products=60, seed=5)
        cfg = dm.SemConfig(**{
            **cfg.__dict__,
            "outcome": dm.OutcomeSpec(**{**cfg.outcome.__dict__,
                                         "noise_scale": 0.0}),
            "price": dm.SignalSpec(**{**cfg.price.__dict__,
                                      "noise_scale": 0.0}),
            "state": dm.StateSpec(intercepts=cfg.state.intercepts,
                                  own_lag=cfg.state.own_lag,
                                  noise_scale=(0.0, 0.0)),
        })
        panel, truth = dm.simulate(cfg)
        rows = dm.build_state(panel, ("similarities", "tabular"))
        sims = rows.X[:, 2:7]
        tab = rows.X[:, 7:]
        q_struct = _eval_signal(cfg.outcome, rows.column("q_lag"),
                                rows.column("p_lag"), sims, tab)
        n, t = panel.n_products, panel.n_periods - 1
        a_flat = truth.a.reshape(-1)
        assert np.allclose(rows.q, a_flat * rows.p + q_struct, atol=1e-10)

    def test_same_seed_byte_identical(self):
        cfg = homog_config(n_products=30, seed=99)
        p1, t1 = dm.simulate(cfg)
        p2, t2 = dm.simulate(cfg)
        assert np.array_equal(p1.q, p2.q) and np.array_equal(p1.p, p2.p)
        assert np.array_equal(p1.tabular, p2.tabular)
        assert np.array_equal(t1.a, t2.a)
        assert np.array_equal(t1.true_embeddings, t2.true_embeddings)

    def test_full_information_ols_recovers_alpha(self):
        panel, _ = dm.simulate(homog_config(n_products=2000, alpha0=-0.5,
                                            seed=7, sigma_q=0.5, sigma_p=0.5))
        rows = dm.build_state(panel, ("similarities", "tabular"))
        A = np.column_stack([np.ones(rows.n_rows), rows.p, rows.X])
        beta, *_ = np.linalg.lstsq(A, rows.q, rcond=None)
        assert abs(beta[1] - (-0.5)) < 0.05

    def test_stability_error(self):
        cfg = homog_config(n_products=10)
        with pytest.raises(ConfigError, match="stability"):
            dm.SemConfig(**{
                **cfg.__dict__,
                "outcome": dm.OutcomeSpec(**{**cfg.outcome.__dict__,
                                             "q_lag": 1.0}),
            })

    def test_ace_matches_sample_mean_of_elasticity(self):
        # mean of realized a_it approaches the configured ace at N=5000
        panel, truth = dm.simulate(hetero_config(n_products=5000, seed=31))
        sample_mean = truth.a.mean()
        se = truth.a.std() / np.sqrt(truth.a.size)
        # centers are pilot-calibrated constants, so allow 3 SEs plus the
        # residual centering offset of the frozen constants
        assert abs(sample_mean - truth.ace) < 3 * se + 0.02

    def test_elasticity_noise_draws_around_cace(self):
        panel, truth = dm.simulate(homog_config(
            n_products=800, seed=3, elasticity_noise=0.2))
        resid = truth.a - truth.cace
        assert abs(resid.mean()) < 0.01
        assert abs(resid.std() - 0.2) < 0.01


class TestExogeneityStructure:
    @staticmethod
    def _residual_corr(cfg):
        panel, truth = dm.simulate(cfg)
        rows = dm.build_state(panel, ("similarities", "tabular"))
        A = np.column_stack([np.ones(rows.n_rows), rows.X])
        p_resid = rows.p - A @ np.linalg.lstsq(A, rows.p, rcond=None)[0]
        # outcome noise estimate: subtract the true price term, project off state
        y = rows.q - truth.a.reshape(-1) * rows.p
        e = y - A @ np.linalg.lstsq(A, y, rcond=None)[0]
        return float(np.corrcoef(p_resid, e)[0, 1])

    def test_no_confounding_when_kappa_zero(self):
        corr = self._residual_corr(homog_config(n_products=5000, seed=17))
        assert abs(corr) < 0.05

    def test_confounding_detectable_when_kappa_nonzero(self):
        corr = self._residual_corr(homog_config(n_products=5000, seed=17,
                                                confounding=0.5))
        assert corr > 0.3


class TestCace:
    def test_centered_state_returns_a0(self):
        cfg = hetero_config(n_products=20)
        state = dm.StateVector(
            q_lag=HET_SPEC.q_lag_center, p_lag=HET_SPEC.p_lag_center,
            controls=np.array([*HET_SPEC.sim_centers, 0.0, 0.0]),
            control_names=("sim_0", "sim_1", "sim_2", "sim_3", "sim_4",
                           "ctrl_0", "ctrl_1"))
        _, truth = dm.simulate(dm.SemConfig(**{**cfg.__dict__,
                                               "n_products": 20}))
        assert dm.ground_truth_cace(truth, state, cfg) == pytest.approx(
            HET_SPEC.a0)

    def test_zero_modifier_coefficients_constant(self):
        cfg = hetero_config(n_products=20)
        flat = dm.HeterogeneousElasticity(a0=-0.6, sim_coefs=(0.0,) * 5)
        cfg = dm.SemConfig(**{**cfg.__dict__, "elasticity": flat})
        _, truth = dm.simulate(cfg)
        state = dm.StateVector(q_lag=3.0, p_lag=-2.0,
                               controls=np.array([0.5, 0.1, -0.2, 0.9, 0.3]),
                               control_names=tuple(f"sim_{k}" for k in range(5)))
        assert dm.ground_truth_cace(truth, state, cfg) == -0.6

    def test_standardized_lag_plug_in(self):
        spec = dm.HeterogeneousElasticity(a0=-0.6, sim_coefs=(0.0,) * 5,
                                          b_quantity_lag=-0.2)
        cfg = hetero_config(n_products=20)
        cfg = dm.SemConfig(**{**cfg.__dict__, "elasticity": spec})
        _, truth = dm.simulate(cfg)
        state = dm.StateVector(q_lag=1.0, p_lag=0.0,
                               controls=np.zeros(5),
                               control_names=tuple(f"sim_{k}" for k in range(5)))
        assert dm.ground_truth_cace(truth, state, cfg) == pytest.approx(-0.8)

    def test_homogeneous_returns_alpha0_for_any_state(self):
        cfg = homog_config(n_products=20)
        _, truth = dm.simulate(cfg)
        state = dm.StateVector(q_lag=123.0, p_lag=-9.0, controls=np.zeros(5),
                               control_names=tuple(f"sim_{k}" for k in range(5)))
        assert dm.ground_truth_cace(truth, state, cfg) == TRUE_ALPHA


class TestConfigRoundTrip:
    def test_sem_config_dict_round_trip(self):
        from demandml.simulator import sem_config_from_dict, sem_config_to_dict
        for cfg in (homog_config(), hetero_config()):
            assert sem_config_from_dict(sem_config_to_dict(cfg)) == cfg
