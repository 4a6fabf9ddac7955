"""Deep-ensemble training and mixture combination."""

import numpy as np
import pytest

from nuqls.data import Dataset, gen_cubic_toy, normalize
from nuqls.deep_ensemble import (
    DeepEnsemble,
    de_member_probs,
    de_predict,
    de_train,
    load_deep_ensemble,
    save_deep_ensemble,
)
from nuqls.mlp import MlpSpec, forward_batch
from nuqls.training import OptimizerSpec, hetero_split


def hetero_spec(width=24):
    return MlpSpec(input_dim=1, output_dim=2, hidden_widths=(width,), activation="tanh")


class TestTrain:
    def test_single_member(self):
        ds = normalize(gen_cubic_toy(20, seed=0))[0]
        opt = OptimizerSpec("adam", learning_rate=1e-2, epochs=200, seed=0)
        ens = de_train(hetero_spec(), ds, 1, opt, seed=1)
        assert ens.n_members == 1
        assert ens.members.shape == (1, hetero_spec().param_count)

    def test_same_master_seed_identical(self):
        ds = normalize(gen_cubic_toy(16, seed=2))[0]
        opt = OptimizerSpec("adam", learning_rate=1e-2, epochs=100, seed=0)
        e1 = de_train(hetero_spec(), ds, 3, opt, seed=5)
        e2 = de_train(hetero_spec(), ds, 3, opt, seed=5)
        np.testing.assert_array_equal(e1.members, e2.members)

    def test_members_differ(self):
        ds = normalize(gen_cubic_toy(16, seed=2))[0]
        opt = OptimizerSpec("adam", learning_rate=1e-2, epochs=50, seed=0)
        ens = de_train(hetero_spec(), ds, 3, opt, seed=6)
        assert not np.array_equal(ens.members[0], ens.members[1])

    def test_toy_cubic_members_converge(self):
        # every member reaches an NLL below the fit-the-noise bound
        ds = normalize(gen_cubic_toy(20, seed=3))[0]
        opt = OptimizerSpec("adam", learning_rate=5e-3, epochs=2500, seed=0)
        ens = de_train(hetero_spec(32), ds, 4, opt, seed=7)
        noise_var = 9.0 / ds.normalization.y_std[0] ** 2
        bound = 0.5 * (1.0 + np.log(noise_var) + np.log(2 * np.pi))
        assert np.all(ens.final_train_losses < bound)

    def test_head_width_validated(self):
        ds = normalize(gen_cubic_toy(10, seed=0))[0]
        bad_spec = MlpSpec(input_dim=1, output_dim=1, hidden_widths=(8,))
        with pytest.raises(ValueError, match="output_dim"):
            de_train(bad_spec, ds, 2, OptimizerSpec("adam", learning_rate=1e-3, epochs=5))


class TestPredict:
    def test_identical_members_keep_member_variance(self):
        ds = normalize(gen_cubic_toy(12, seed=4))[0]
        opt = OptimizerSpec("adam", learning_rate=1e-2, epochs=60, seed=0)
        single = de_train(hetero_spec(), ds, 1, opt, seed=8)
        tripled = DeepEnsemble(spec=single.spec,
                               members=np.tile(single.members, (3, 1)),
                               final_train_losses=np.tile(single.final_train_losses, 3),
                               classification=False, seed=8)
        Xs = np.linspace(-2, 2, 7)[:, None]
        _, s2 = hetero_split(forward_batch(single.spec, single.members[0], Xs))
        post = de_predict(tripled, Xs)
        np.testing.assert_allclose(post.variance, s2, rtol=1e-12)

    def test_two_point_mixture_hand_value(self):
        # members predicting +/- a with zero member variance: mixture var a^2
        spec = hetero_spec(4)
        a = 0.8
        ens_members = np.zeros((2, spec.param_count))
        ens = DeepEnsemble(spec=spec, members=ens_members,
                           final_train_losses=np.zeros(2),
                           classification=False, seed=0)
        mus = np.array([[[a]], [[-a]]])
        s2s = np.zeros_like(mus)
        mean = mus.mean(axis=0)
        var = (s2s + mus ** 2).mean(axis=0) - mean ** 2
        np.testing.assert_allclose(var, a ** 2)

    def test_mixture_variance_dominates_average_member_variance(self):
        # law of total variance: mixture variance >= mean member variance
        ds = normalize(gen_cubic_toy(16, seed=5))[0]
        opt = OptimizerSpec("adam", learning_rate=1e-2, epochs=150, seed=0)
        ens = de_train(hetero_spec(), ds, 4, opt, seed=9)
        Xs = np.linspace(-2, 2, 11)[:, None]
        member_vars = []
        for s in range(4):
            _, s2 = hetero_split(forward_batch(ens.spec, ens.members[s], Xs))
            member_vars.append(s2)
        post = de_predict(ens, Xs)
        assert np.all(post.variance >= np.mean(member_vars, axis=0) - 1e-12)

    def test_member_permutation_invariance(self):
        ds = normalize(gen_cubic_toy(16, seed=6))[0]
        opt = OptimizerSpec("adam", learning_rate=1e-2, epochs=80, seed=0)
        ens = de_train(hetero_spec(), ds, 4, opt, seed=10)
        perm = DeepEnsemble(spec=ens.spec, members=ens.members[::-1].copy(),
                            final_train_losses=ens.final_train_losses[::-1].copy(),
                            classification=False, seed=10)
        Xs = np.linspace(-2, 2, 5)[:, None]
        p1, p2 = de_predict(ens, Xs), de_predict(perm, Xs)
        np.testing.assert_allclose(p1.mean, p2.mean, atol=1e-12)
        np.testing.assert_allclose(p1.variance, p2.variance, atol=1e-12)

    def test_classification_probs(self):
        rng = np.random.default_rng(11)
        ds = Dataset(rng.standard_normal((30, 2)), rng.integers(0, 3, size=30))
        spec = MlpSpec(input_dim=2, output_dim=3, hidden_widths=(8,))
        opt = OptimizerSpec("adam", learning_rate=1e-2, epochs=60, seed=0)
        ens = de_train(spec, ds, 3, opt, seed=12)
        probs = de_member_probs(ens, ds.X[:5])
        assert probs.shape == (3, 5, 3)
        np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-12)
        post = de_predict(ens, ds.X[:5])
        np.testing.assert_allclose(post.mean, probs.mean(axis=0), atol=1e-15)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        ds = normalize(gen_cubic_toy(12, seed=7))[0]
        opt = OptimizerSpec("adam", learning_rate=1e-2, epochs=30, seed=0)
        ens = de_train(hetero_spec(), ds, 2, opt, seed=13)
        path = tmp_path / "de.npz"
        save_deep_ensemble(path, ens)
        back = load_deep_ensemble(path)
        np.testing.assert_array_equal(back.members, ens.members)
        assert back.spec == ens.spec
        assert back.classification == ens.classification
