"""Linearized-ensemble sampling: affinity, training paths, posterior match."""

import numpy as np
import pytest

from nuqls.data import Dataset, gen_blobs_classification, gen_gaussian_synthetic, normalize
from nuqls.linearize import (
    LinearizedModel,
    NuqlsConfig,
    NuqlsEnsemble,
    ensemble_predict,
    ensemble_stats,
    load_ensemble,
    nuqls_sample,
    save_ensemble,
)
from nuqls.mlp import MlpSpec, forward, forward_batch, init_params, jacobian_stack
from nuqls.ntk import gp_posterior_general, gp_posterior_regression, sev
from nuqls.training import LossSpec, OptimizerSpec, train


def small_problem(seed=0, n=12, d=3, width=16):
    rng = np.random.default_rng(seed)
    spec = MlpSpec(input_dim=d, output_dim=1, hidden_widths=(width,), activation="tanh")
    theta = init_params(spec, "xavier_normal", seed=seed)
    ds = Dataset(rng.standard_normal((n, d)), rng.standard_normal((n, 1)))
    return spec, theta, ds


def fast_gd(epochs=2000, lr=0.02, target=None, seed=0):
    return OptimizerSpec("gd", learning_rate=lr, momentum=0.9, nesterov=True,
                         epochs=epochs, seed=seed, target_loss=target)


class TestLinearizedForward:
    def test_matches_network_at_reference(self):
        spec, theta, ds = small_problem()
        lin = LinearizedModel(spec, theta)
        x = ds.X[0]
        np.testing.assert_allclose(lin.forward(theta, x), forward(spec, theta, x),
                                   atol=1e-12)

    def test_affine_superposition(self):
        spec, theta, ds = small_problem(seed=1)
        lin = LinearizedModel(spec, theta)
        rng = np.random.default_rng(2)
        v = rng.standard_normal(spec.param_count)
        x = ds.X[0]
        f0 = forward(spec, theta, x)
        d1 = lin.forward(theta + v, x) - f0
        d2 = lin.forward(theta + 2.0 * v, x) - f0
        np.testing.assert_allclose(d2, 2.0 * d1, rtol=1e-12, atol=1e-12)

    def test_exact_for_model_linear_in_parameters(self):
        spec = MlpSpec(input_dim=4, output_dim=2, hidden_widths=(),
                       activation="identity", bias=False)
        rng = np.random.default_rng(3)
        ref = rng.standard_normal(spec.param_count)
        lin = LinearizedModel(spec, ref)
        for _ in range(5):
            theta = rng.standard_normal(spec.param_count)
            x = rng.standard_normal(4)
            np.testing.assert_allclose(lin.forward(theta, x),
                                       forward(spec, theta, x), atol=1e-12)


class TestSamplingBasics:
    def test_same_seed_identical_ensembles(self):
        spec, theta, ds = small_problem(seed=4)
        lin = LinearizedModel(spec, theta)
        cfg = NuqlsConfig(n_members=4, gamma=0.1, opt=fast_gd(epochs=200), seed=11)
        e1 = nuqls_sample(lin, ds, cfg)
        e2 = nuqls_sample(lin, ds, cfg)
        np.testing.assert_array_equal(e1.members, e2.members)

    def test_zero_gamma_limit_on_interpolating_reference(self):
        # linear-in-parameter model interpolating the data: members stay put
        rng = np.random.default_rng(5)
        X = rng.standard_normal((4, 8))
        y = rng.standard_normal((4, 1))
        theta_hat, *_ = np.linalg.lstsq(X, y[:, 0], rcond=None)
        spec = MlpSpec(input_dim=8, output_dim=1, hidden_widths=(),
                       activation="identity", bias=False)
        ds = Dataset(X, y)
        lin = LinearizedModel(spec, theta_hat)
        base = float(np.mean((X @ theta_hat - y[:, 0]) ** 2))
        assert base < 1e-10  # interpolating reference
        cfg = NuqlsConfig(n_members=8, gamma=1e-9, opt=fast_gd(epochs=500), seed=6)
        ens = nuqls_sample(lin, ds, cfg)
        stats = ensemble_stats(ensemble_predict(lin, ens, rng.standard_normal((6, 8))))
        assert stats.variance.max() < 1e-12

    def test_member_failure_reports_index(self):
        spec, theta, ds = small_problem(seed=7)
        lin = LinearizedModel(spec, theta)
        bad = OptimizerSpec("gd", learning_rate=1e9, epochs=50)
        cfg = NuqlsConfig(n_members=3, gamma=0.1, opt=bad, seed=0)
        from nuqls.training import TrainingDivergedError

        with np.errstate(over="ignore", invalid="ignore"), \
                pytest.raises(TrainingDivergedError, match="member"):
            nuqls_sample(lin, ds, cfg)

    def test_no_mode_collapse(self):
        spec, theta, ds = small_problem(seed=8)
        lin = LinearizedModel(spec, theta)
        cfg = NuqlsConfig(n_members=10, gamma=0.5, opt=fast_gd(epochs=500), seed=9)
        ens = nuqls_sample(lin, ds, cfg)
        for i in range(10):
            for j in range(i + 1, 10):
                assert np.abs(ens.members[i] - ens.members[j]).max() > 0


class TestPathAgreement:
    @pytest.mark.parametrize("momentum,nesterov", [(0.0, False), (0.9, False), (0.9, True)])
    def test_gram_batched_permember_identical(self, momentum, nesterov):
        spec, theta, ds = small_problem(seed=10)
        lin = LinearizedModel(spec, theta)
        opt = OptimizerSpec("gd", learning_rate=0.02, momentum=momentum,
                            nesterov=nesterov, epochs=120, seed=1)
        results = {}
        for method in ("gram", "batched", "permember"):
            cfg = NuqlsConfig(n_members=3, gamma=0.2, opt=opt, seed=13, method=method)
            results[method] = nuqls_sample(lin, ds, cfg)
        for method in ("batched", "permember"):
            np.testing.assert_allclose(results[method].members,
                                       results["gram"].members,
                                       rtol=1e-9, atol=1e-11)
            np.testing.assert_allclose(results[method].final_train_losses,
                                       results["gram"].final_train_losses,
                                       rtol=1e-7, atol=1e-12)

    def test_minibatch_batched_matches_permember(self):
        spec, theta, ds = small_problem(seed=11)
        lin = LinearizedModel(spec, theta)
        opt = OptimizerSpec("sgd", learning_rate=0.1, momentum=0.9, nesterov=True,
                            batch_size=4, epochs=60, seed=3)
        outs = {}
        for method in ("batched", "permember"):
            cfg = NuqlsConfig(n_members=3, gamma=0.2, opt=opt, seed=17, method=method)
            outs[method] = nuqls_sample(lin, ds, cfg)
        np.testing.assert_allclose(outs["batched"].members, outs["permember"].members,
                                   rtol=1e-9, atol=1e-11)

    def test_cross_entropy_gram_matches_batched(self):
        ds, _ = gen_blobs_classification(30, classes=3, separation=4.0, seed=0)
        ds = normalize(ds)[0]
        spec = MlpSpec(input_dim=2, output_dim=3, hidden_widths=(12,), activation="tanh")
        theta = init_params(spec, "xavier_normal", seed=4)
        lin = LinearizedModel(spec, theta)
        opt = OptimizerSpec("gd", learning_rate=0.5, momentum=0.9, nesterov=True,
                            epochs=150, seed=5)
        outs = {}
        for method in ("gram", "batched"):
            cfg = NuqlsConfig(n_members=3, gamma=0.1, opt=opt,
                              loss=LossSpec("cross_entropy"), seed=19, method=method)
            outs[method] = nuqls_sample(lin, ds, cfg)
        np.testing.assert_allclose(outs["gram"].members, outs["batched"].members,
                                   rtol=1e-9, atol=1e-11)


class TestEnsembleStats:
    def _preds(self):
        rng = np.random.default_rng(20)
        return rng.standard_normal((6, 5, 1))

    def test_identical_members_zero_variance(self):
        preds = np.tile(self._preds()[:1], (4, 1, 1))
        stats = ensemble_stats(preds)
        np.testing.assert_array_equal(stats.variance, np.zeros((5, 1)))

    def test_gamma_scale_quadruples_variance(self):
        preds = self._preds()
        s1 = ensemble_stats(preds, gamma_scale=1.0)
        s2 = ensemble_stats(preds, gamma_scale=2.0)
        np.testing.assert_array_equal(s2.variance, 4.0 * s1.variance)
        np.testing.assert_array_equal(s2.mean, s1.mean)

    def test_two_members_unbiased_variance(self):
        a = 0.7
        preds = np.stack([np.full((3, 1), 1.0 + a), np.full((3, 1), 1.0 - a)])
        stats = ensemble_stats(preds)
        np.testing.assert_allclose(stats.variance, 2 * a ** 2, rtol=1e-12)

    def test_member_permutation_invariant(self):
        preds = self._preds()
        perm = np.random.default_rng(0).permutation(6)
        s1, s2 = ensemble_stats(preds), ensemble_stats(preds[perm])
        np.testing.assert_allclose(s1.mean, s2.mean, atol=1e-15)
        np.testing.assert_allclose(s1.variance, s2.variance, atol=1e-15)

    def test_single_member_rejected_for_stats(self):
        with pytest.raises(ValueError):
            ensemble_stats(self._preds()[:1])

    def test_softmax_mode_probability_rows(self):
        rng = np.random.default_rng(21)
        preds = rng.standard_normal((4, 3, 5))
        stats = ensemble_stats(preds, mode="softmax")
        np.testing.assert_allclose(stats.mean.sum(axis=1), 1.0, atol=1e-12)

    def test_empty_test_set(self):
        spec, theta, ds = small_problem(seed=22)
        lin = LinearizedModel(spec, theta)
        cfg = NuqlsConfig(n_members=2, gamma=0.1, opt=fast_gd(epochs=20), seed=1)
        ens = nuqls_sample(lin, ds, cfg)
        preds = ensemble_predict(lin, ens, np.empty((0, 3)))
        assert preds.shape == (2, 0, 1)


class TestTheoremInvariants:
    def test_interpolation_and_nullspace_residuals(self):
        # converged full-batch GD members: interpolation + range-space property
        rng = np.random.default_rng(23)
        train, _ = gen_gaussian_synthetic(20, 5, seed=24)
        spec = MlpSpec(input_dim=5, output_dim=1, hidden_widths=(64,),
                       activation="tanh", scaling="ntk", bias=False)
        theta0 = init_params(spec, "standard_normal", seed=25)
        res = train_reference(spec, theta0, train)
        lin = LinearizedModel(spec, res)
        J = jacobian_stack(spec, res, train.X)
        sv = np.linalg.svd(J, compute_uv=False)
        assert sv.min() > 1e-8 * sv.max()  # full row-rank
        opt = OptimizerSpec("gd", learning_rate=1.0, momentum=0.999, nesterov=True,
                            epochs=30000, seed=0, target_loss=1e-11)
        cfg = NuqlsConfig(n_members=4, gamma=0.1, opt=opt, seed=26)
        ens = nuqls_sample(lin, train, cfg)
        inits = res[None, :] + 0.1 * np.random.default_rng(26).standard_normal(
            (4, spec.param_count))
        y = train.Y[:, 0]
        from nuqls.ntk import nullspace_residual

        for s in range(4):
            pred = lin.predict(ens.members[s], train.X)[:, 0]
            assert np.linalg.norm(pred - y) / np.linalg.norm(y) < 1e-4
            move = np.linalg.norm(ens.members[s] - inits[s])
            assert nullspace_residual(spec, res, train.X, ens.members[s],
                                      inits[s]) < 1e-6 * move


def train_reference(spec, theta0, ds, epochs=800):
    res = train(spec, theta0, ds, LossSpec("mse", "mean"),
                OptimizerSpec("gd", learning_rate=0.1, momentum=0.9, nesterov=True,
                              epochs=epochs, seed=0))
    return res.theta


class TestPosteriorMatch:
    def test_variance_matches_closed_form_width512(self):
        # the convergence experiment's single-seed core at S=500
        train_ds, test_ds = gen_gaussian_synthetic(100, 5, seed=0)
        spec = MlpSpec(input_dim=5, output_dim=1, hidden_widths=(512,),
                       activation="tanh", scaling="ntk", bias=False)
        theta0 = init_params(spec, "standard_normal", seed=1)
        theta_hat = train_reference(spec, theta0, train_ds, epochs=1500)
        lin = LinearizedModel(spec, theta_hat)
        opt = OptimizerSpec("gd", learning_rate=1.0, momentum=0.999, nesterov=True,
                            epochs=30000, seed=0, target_loss=1e-9)
        cfg = NuqlsConfig(n_members=500, gamma=0.1, opt=opt, seed=42)
        ens = nuqls_sample(lin, train_ds, cfg)
        assert ens.final_train_losses.max() < 1e-8
        post = gp_posterior_regression(spec, theta_hat, train_ds, test_ds.X, gamma=0.1)
        stats = ensemble_stats(ensemble_predict(lin, ens, test_ds.X))
        rel = np.mean(np.abs(stats.variance - post.variance)) / np.mean(post.variance)
        assert rel < 0.1
        # Monte-Carlo convergence: more members, closer to the closed form
        sev10 = sev(ensemble_stats(ensemble_predict(lin, ens, test_ds.X)[:10]).variance,
                    post.variance)
        sev500 = sev(stats.variance, post.variance)
        assert sev500 < sev10

    def test_logit_covariance_matches_general_posterior(self):
        # 2-class net trained on one-hot targets with mse: member logit
        # covariance against the closed-form covariance blocks
        rng = np.random.default_rng(30)
        X = rng.standard_normal((16, 3))
        labels = rng.integers(0, 2, size=16)
        ds = Dataset(X, np.eye(2)[labels])
        spec = MlpSpec(input_dim=3, output_dim=2, hidden_widths=(96,),
                       activation="tanh", scaling="ntk", bias=False)
        theta0 = init_params(spec, "standard_normal", seed=31)
        theta_hat = train_reference(spec, theta0, ds, epochs=600)
        lin = LinearizedModel(spec, theta_hat)
        opt = OptimizerSpec("gd", learning_rate=1.0, momentum=0.999, nesterov=True,
                            epochs=30000, seed=0, target_loss=1e-10)
        cfg = NuqlsConfig(n_members=500, gamma=0.05, opt=opt, seed=34)
        ens = nuqls_sample(lin, ds, cfg)
        assert ens.final_train_losses.max() < 1e-9
        Xs = rng.standard_normal((8, 3))
        post = gp_posterior_general(spec, theta_hat, ds, Xs, gamma=0.05)
        preds = ensemble_predict(lin, ens, Xs)  # (S, m, 2)
        for i in range(8):
            emp = np.cov(preds[:, i, :].T, ddof=1)
            err = np.linalg.norm(emp - post.covariance[i]) / np.linalg.norm(post.covariance[i])
            assert err < 0.15


class TestSerialization:
    def test_round_trip(self, tmp_path):
        spec, theta, ds = small_problem(seed=40)
        lin = LinearizedModel(spec, theta)
        cfg = NuqlsConfig(n_members=3, gamma=0.3, opt=fast_gd(epochs=50), seed=41)
        ens = nuqls_sample(lin, ds, cfg)
        path = tmp_path / "ens.npz"
        save_ensemble(path, lin, ens)
        lin2, ens2 = load_ensemble(path)
        np.testing.assert_array_equal(ens2.members, ens.members)
        np.testing.assert_array_equal(lin2.theta_ref, lin.theta_ref)
        assert ens2.gamma == ens.gamma
        Xs = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_allclose(ensemble_predict(lin2, ens2, Xs),
                                   ensemble_predict(lin, ens, Xs), atol=1e-12)
