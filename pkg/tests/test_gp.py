"""Gaussian-process regression tests: closed forms, likelihood gradients, and
posterior-variance structure."""

import numpy as np
import pytest

from tailbed.gp import (
    GpModel,
    gp_fit,
    gp_posterior,
    neg_log_marginal_likelihood,
    rbf_ard,
)
from tailbed.stats import ObservationSet


@pytest.fixture()
def line_data():
    x = np.linspace(0.0, 1.0, 5)[:, None]
    return ObservationSet(x, x.ravel())


class TestGpFit:
    def test_noiseless_interpolation(self, line_data):
        model = gp_fit(line_data, restarts=8, seed=0)
        model.sigma_eps2 = 0.0  # the claim holds in the noise-free limit
        model.refactor()
        mu, _ = model.predict(line_data.inputs)
        assert np.abs(mu - line_data.outputs).max() < 1e-6

    def test_more_restarts_never_worse(self, line_data):
        m1 = gp_fit(line_data, restarts=1, seed=42)
        m10 = gp_fit(line_data, restarts=10, seed=42)
        assert m10.log_marginal_likelihood() >= m1.log_marginal_likelihood() - 1e-9

    def test_requires_two_points(self):
        with pytest.raises(ValueError):
            gp_fit(ObservationSet(np.zeros((1, 2)), np.zeros(1)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-2, 2, (6, 2))
        y = np.sin(x[:, 0]) + 0.5 * rng.standard_normal(6)
        theta = np.array([np.log(0.8), np.log(1.3), np.log(1.5), np.log(1e-3)])
        _, grad = neg_log_marginal_likelihood(theta, x, y)
        h = 1e-5
        fd = np.empty_like(theta)
        for i in range(theta.size):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            fd[i] = (neg_log_marginal_likelihood(tp, x, y)[0]
                     - neg_log_marginal_likelihood(tm, x, y)[0]) / (2 * h)
        assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-4


class TestGpPosterior:
    @pytest.fixture()
    def single_point_model(self):
        return GpModel(train_inputs=np.array([[0.5, -0.2]]), train_targets=np.array([1.7]),
                       sigma_f2=2.0, ell2=np.array([0.7, 1.4]), sigma_eps2=0.3)

    def test_training_point_noise_free(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, (6, 2))
        y = np.cos(x).sum(axis=1)
        model = GpModel(train_inputs=x, train_targets=y, sigma_f2=1.0,
                        ell2=np.array([0.5, 0.5]), sigma_eps2=0.0)
        mu, var = model.predict(x)
        assert np.abs(mu - y).max() < 1e-6
        assert np.abs(var).max() < 1e-8

    def test_far_field_reverts_to_prior(self, single_point_model):
        mu, var = gp_posterior(single_point_model, np.array([40.0, 40.0]))
        assert mu == pytest.approx(single_point_model.m0, abs=1e-6)
        assert var == pytest.approx(single_point_model.sigma_f2, rel=1e-6)

    def test_single_point_closed_form(self, single_point_model):
        m = single_point_model
        rng = np.random.default_rng(3)
        xq = rng.uniform(-1, 1, (10, 2))
        mu, var = m.predict(xq)
        kq = rbf_ard(xq, m.train_inputs, m.sigma_f2, m.ell2).ravel()
        mu_ref = kq * m.train_targets[0] / (m.sigma_f2 + m.sigma_eps2)
        var_ref = m.sigma_f2 - kq**2 / (m.sigma_f2 + m.sigma_eps2)
        assert np.abs(mu - mu_ref).max() < 1e-10
        assert np.abs(var - var_ref).max() < 1e-10

    def test_variance_never_exceeds_prior(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-3, 3, (12, 2))
        model = GpModel(train_inputs=x, train_targets=np.sin(x[:, 0]), sigma_f2=1.3,
                        ell2=np.array([0.8, 0.6]), sigma_eps2=1e-4)
        _, var = model.predict(rng.uniform(-4, 4, (200, 2)))
        assert var.max() <= model.sigma_f2 + 1e-10

    def test_adding_data_never_increases_variance(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-2, 2, (8, 2))
        y = np.sin(x[:, 0]) * np.cos(x[:, 1])
        hyp = dict(sigma_f2=1.0, ell2=np.array([0.7, 0.7]), sigma_eps2=1e-6)
        small = GpModel(train_inputs=x, train_targets=y, **hyp)
        x_new = np.vstack([x, rng.uniform(-2, 2, (1, 2))])
        y_new = np.concatenate([y, [0.3]])
        big = GpModel(train_inputs=x_new, train_targets=y_new, **hyp)
        queries = rng.uniform(-2.5, 2.5, (20, 2))
        assert np.all(big.predict(queries)[1] <= small.predict(queries)[1] + 1e-10)

    def test_batch_equals_pointwise(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-2, 2, (10, 3))
        y = rng.standard_normal(10)
        model = GpModel(train_inputs=x, train_targets=y, sigma_f2=0.9,
                        ell2=np.array([0.5, 1.0, 2.0]), sigma_eps2=1e-5)
        queries = rng.uniform(-2, 2, (1000, 3))
        mu_b, var_b = model.predict(queries)
        for i in range(0, 1000, 97):
            mu_i, var_i = gp_posterior(model, queries[i])
            assert mu_i == pytest.approx(mu_b[i], abs=1e-10)
            assert var_i == pytest.approx(var_b[i], abs=1e-10)

    def test_standardization_round_trip(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 1, (20, 1))
        y = 3e6 * x.ravel() + 1e7  # far from unit scale
        model = gp_fit(ObservationSet(x, y), restarts=6, seed=0)
        mu, _ = model.predict(x)
        assert np.abs(mu - y).max() / np.abs(y).max() < 1e-3
