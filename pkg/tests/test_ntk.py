"""Kernel, Gram factorization, and closed-form posterior checks."""

import logging

import numpy as np
import pytest

from nuqls.data import Dataset, gen_gaussian_synthetic
from nuqls.mlp import MlpSpec, forward_batch, init_params, jacobian, jacobian_stack
from nuqls.ntk import (
    BudgetExceededError,
    gp_posterior_general,
    gp_posterior_regression,
    gram,
    ntk_block,
    nullspace_residual,
    sev,
)


def small_net(seed=0, c=1, width=16, d=3, scaling="standard", bias=True):
    spec = MlpSpec(input_dim=d, output_dim=c, hidden_widths=(width,),
                   activation="tanh", scaling=scaling, bias=bias)
    theta = init_params(spec, "xavier_normal", seed=seed)
    return spec, theta


class TestKernelBlock:
    def test_linear_model_inner_product(self):
        spec = MlpSpec(input_dim=4, output_dim=1, hidden_widths=(), bias=False)
        rng = np.random.default_rng(0)
        theta = rng.standard_normal(4)
        x, y = rng.standard_normal(4), rng.standard_normal(4)
        np.testing.assert_allclose(ntk_block(spec, theta, x, y), [[x @ y]], atol=1e-14)

    def test_diagonal_block_psd(self):
        spec, theta = small_net(c=3)
        x = np.random.default_rng(1).standard_normal(3)
        K = ntk_block(spec, theta, x, x)
        evals = np.linalg.eigvalsh(0.5 * (K + K.T))
        assert evals.min() >= -1e-10

    def test_transpose_symmetry(self):
        spec, theta = small_net(c=2, seed=3)
        rng = np.random.default_rng(4)
        x, y = rng.standard_normal(3), rng.standard_normal(3)
        np.testing.assert_allclose(ntk_block(spec, theta, x, y),
                                   ntk_block(spec, theta, y, x).T, atol=1e-12)


class TestGram:
    def test_single_point_is_gradient_norm(self):
        spec, theta = small_net(seed=5)
        x = np.random.default_rng(6).standard_normal((1, 3))
        G = gram(spec, theta, x)
        expected = np.linalg.norm(jacobian(spec, theta, x[0])) ** 2
        np.testing.assert_allclose(G.K, [[expected]], rtol=1e-12)

    def test_duplicated_row_needs_jitter(self):
        spec, theta = small_net(seed=7)
        rng = np.random.default_rng(8)
        X = rng.standard_normal((5, 3))
        X[3] = X[1]  # exact rank deficiency
        G = gram(spec, theta, X)
        assert G.jitter_used > 0

    def test_symmetry_and_psd(self):
        spec, theta = small_net(seed=9, c=2)
        X = np.random.default_rng(10).standard_normal((7, 3))
        G = gram(spec, theta, X)
        assert np.abs(G.K - G.K.T).max() < 1e-10
        assert np.linalg.eigvalsh(G.K).min() > -1e-10

    def test_chunked_assembly_matches_direct(self):
        spec, theta = small_net(seed=11, c=2)
        X = np.random.default_rng(12).standard_normal((9, 3))
        direct = gram(spec, theta, X)
        # budget too small to hold the stacked Jacobian but enough for K
        chunked = gram(spec, theta, X, budget=5 * spec.param_count)
        np.testing.assert_allclose(chunked.K, direct.K, atol=1e-10)
        assert chunked.J is None and direct.J is not None

    def test_budget_exceeded(self):
        spec, theta = small_net(seed=13)
        X = np.random.default_rng(14).standard_normal((30, 3))
        with pytest.raises(BudgetExceededError):
            gram(spec, theta, X, budget=100)

    def test_convergence_setup_condition_range(self):
        # n=100, d=5, NTK-scaled width-512 net: condition within ~1e3..1e8
        train, _ = gen_gaussian_synthetic(100, 5, seed=0)
        spec = MlpSpec(input_dim=5, output_dim=1, hidden_widths=(512,),
                       activation="tanh", scaling="ntk", bias=False)
        theta = init_params(spec, "standard_normal", seed=1)
        G = gram(spec, theta, train.X)
        assert 1e3 <= G.condition_estimate <= 1e8


def interpolating_linear_problem(seed=0, n=4, d=6):
    """Scalar linear model with more parameters than points: exact interpolation."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = rng.standard_normal((n, 1))
    theta_hat, *_ = np.linalg.lstsq(X, y[:, 0], rcond=None)
    spec = MlpSpec(input_dim=d, output_dim=1, hidden_widths=(),
                   activation="identity", bias=False)
    return spec, theta_hat, Dataset(X, y)


class TestPosteriorRegression:
    def test_training_point_variance_vanishes(self):
        spec, theta = small_net(seed=15)
        X = np.random.default_rng(16).standard_normal((10, 3))
        ds = Dataset(X, np.random.default_rng(17).standard_normal((10, 1)))
        post = gp_posterior_regression(spec, theta, ds, X[:3], gamma=1.0)
        kappa = np.array([jacobian(spec, theta, x)[0] @ jacobian(spec, theta, x)[0]
                          for x in X[:3]])
        assert np.all(post.variance[:, 0] < 1e-8 * kappa)

    def test_gamma_scaling_exact(self):
        spec, theta = small_net(seed=18)
        rng = np.random.default_rng(19)
        ds = Dataset(rng.standard_normal((8, 3)), rng.standard_normal((8, 1)))
        Xs = rng.standard_normal((5, 3))
        G = gram(spec, theta, ds.X)
        p1 = gp_posterior_regression(spec, theta, ds, Xs, gamma=1.0, gram_=G)
        p2 = gp_posterior_regression(spec, theta, ds, Xs, gamma=2.0, gram_=G)
        np.testing.assert_array_equal(p2.variance, 4.0 * p1.variance)
        np.testing.assert_array_equal(p2.mean, p1.mean)

    def test_interpolating_reference_mean_is_network_output(self):
        spec, theta_hat, ds = interpolating_linear_problem()
        Xs = np.random.default_rng(20).standard_normal((6, 6))
        post = gp_posterior_regression(spec, theta_hat, ds, Xs, gamma=0.5)
        np.testing.assert_allclose(post.mean, forward_batch(spec, theta_hat, Xs),
                                   atol=1e-9)

    def test_rejects_vector_output(self):
        spec, theta = small_net(seed=21, c=2)
        ds = Dataset(np.zeros((3, 3)), np.zeros((3, 2)))
        with pytest.raises(ValueError):
            gp_posterior_regression(spec, theta, ds, np.zeros((2, 3)), 1.0)


class TestPosteriorGeneral:
    def test_scalar_case_matches_regression_variance(self):
        spec, theta = small_net(seed=22)
        rng = np.random.default_rng(23)
        ds = Dataset(rng.standard_normal((9, 3)), rng.standard_normal((9, 1)))
        Xs = rng.standard_normal((4, 3))
        G = gram(spec, theta, ds.X)
        reg = gp_posterior_regression(spec, theta, ds, Xs, gamma=1.3, gram_=G)
        gen = gp_posterior_general(spec, theta, ds, Xs, gamma=1.3, gram_=G)
        np.testing.assert_allclose(gen.variance, reg.variance, atol=1e-12)

    def test_covariance_blocks_symmetric_psd(self):
        spec, theta = small_net(seed=24, c=3)
        rng = np.random.default_rng(25)
        ds = Dataset(rng.standard_normal((8, 3)), rng.standard_normal((8, 3)))
        Xs = rng.standard_normal((5, 3))
        post = gp_posterior_general(spec, theta, ds, Xs, gamma=1.0)
        for block in post.covariance:
            np.testing.assert_allclose(block, block.T, atol=1e-12)
            assert np.linalg.eigvalsh(block).min() >= -1e-12


class TestSev:
    def test_identical_zero(self):
        assert sev(np.ones(5), np.ones(5)) == 0.0

    def test_three_four_five(self):
        assert sev(np.array([3.0, 4.0]), np.zeros(2)) == 5.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            sev(np.ones(3), np.ones(4))


class TestNullspaceResidual:
    def test_zero_displacement(self):
        spec, theta = small_net(seed=26)
        X = np.random.default_rng(27).standard_normal((6, 3))
        z = np.random.default_rng(28).standard_normal(spec.param_count)
        assert nullspace_residual(spec, theta, X, z, z) == 0.0

    def test_in_range_displacement(self):
        spec, theta = small_net(seed=29)
        rng = np.random.default_rng(30)
        X = rng.standard_normal((6, 3))
        J = jacobian_stack(spec, theta, X)
        z = rng.standard_normal(spec.param_count)
        star = z + J.T @ rng.standard_normal(6)
        resid = nullspace_residual(spec, theta, X, star, z)
        assert resid < 1e-8 * np.linalg.norm(star - z)

    def test_out_of_range_displacement_detected(self):
        spec, theta = small_net(seed=31)
        rng = np.random.default_rng(32)
        X = rng.standard_normal((4, 3))
        z = np.zeros(spec.param_count)
        star = rng.standard_normal(spec.param_count)  # generic: not in range
        resid = nullspace_residual(spec, theta, X, star, z)
        assert resid > 1e-3 * np.linalg.norm(star)


class TestCsvExport:
    def test_gram_and_posterior_files(self, tmp_path):
        from nuqls.ntk import export_gram_csv, export_posterior_csv

        spec, theta = small_net(seed=40)
        rng = np.random.default_rng(41)
        ds = Dataset(rng.standard_normal((6, 3)), rng.standard_normal((6, 1)))
        G = gram(spec, theta, ds.X)
        gpath = tmp_path / "gram.csv"
        export_gram_csv(G, gpath)
        back = np.loadtxt(gpath, delimiter=",")
        np.testing.assert_allclose(back, G.K, rtol=1e-12)
        assert "condition_estimate" in (tmp_path / "gram.csv.meta").read_text()

        post = gp_posterior_regression(spec, theta, ds, rng.standard_normal((4, 3)),
                                       gamma=1.5, gram_=G)
        ppath = tmp_path / "post.csv"
        export_posterior_csv(post, ppath)
        text = ppath.read_text().splitlines()
        assert text[0] == "mean_0,variance_0,gamma"
        assert len(text) == 5
