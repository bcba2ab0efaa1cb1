import copy
import math

import numpy as np
import pytest

from lsebm import autodiff as ad
from lsebm import trainer as tr
from lsebm.autodiff import Tape, Tensor
from lsebm.errors import (InvalidBatch, InvalidLabel, InvalidShape,
                          NonFiniteGradient)
from lsebm.evaluation import QuadratureGrid, finite_diff_check
from lsebm.nets import AmortizedPosterior, Decoder, EBMPrior, reparam_sample


class TestAdam:
    def test_scripted_quadratic_trace(self):
        # minimize f(w) = w^2 from w0 = 1 with lr = 0.1; compare against an
        # independently scripted reference implementation step by step
        slot = tr.AdamSlot(np.zeros(1), np.zeros(1))
        w = np.array([1.0])
        m = v = 0.0
        ref = 1.0
        b1, b2, eps = 0.9, 0.999, 1e-8
        for t in range(1, 21):
            w = tr.adam_step(slot, w, 2.0 * w, lr=0.1)
            g = 2.0 * ref
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref - 0.1 * (m / (1 - b1 ** t)) / (
                math.sqrt(v / (1 - b2 ** t)) + eps)
            assert abs(w[0] - ref) <= 1e-12
        assert abs(w[0]) < 1.0

    def test_first_step_is_lr_times_sign(self):
        slot = tr.AdamSlot(np.zeros(3), np.zeros(3))
        w = np.array([1.0, -2.0, 0.5])
        g = np.array([1e-3, -7.0, 2.0])
        out = tr.adam_step(slot, w, g, lr=0.01)
        np.testing.assert_allclose(out, w - 0.01 * np.sign(g), atol=1e-7)

    def test_zero_gradient_leaves_parameter_unchanged(self):
        slot = tr.AdamSlot(np.zeros(2), np.zeros(2))
        w = np.array([0.3, -0.4])
        out = tr.adam_step(slot, w, np.zeros(2), lr=0.1)
        np.testing.assert_array_equal(out, w)

    def test_non_finite_gradient_rejected(self):
        slot = tr.AdamSlot(np.zeros(1), np.zeros(1))
        with pytest.raises(NonFiniteGradient):
            tr.adam_step(slot, np.zeros(1), np.array([np.nan]), lr=0.1)

    def test_shape_mismatch_rejected(self):
        slot = tr.AdamSlot(np.zeros(2), np.zeros(2))
        with pytest.raises(InvalidShape):
            tr.adam_step(slot, np.zeros(2), np.zeros(3), lr=0.1)

    def test_maximize_ascends(self):
        # maximize -(w-2)^2: gradient is -2(w-2); should move w toward 2
        p = Tensor([0.0], requires_grad=True)
        opt = tr.Adam([p], lr=0.05, maximize=True)
        for _ in range(500):
            p.grad = -2.0 * (p.data - 2.0)
            opt.step()
        assert abs(p.data[0] - 2.0) < 0.05

    def test_state_round_trip(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        opt = tr.Adam([p], lr=0.1)
        p.grad = np.array([0.5, -0.5])
        opt.step()
        saved = opt.state()
        q = Tensor([1.0, 2.0], requires_grad=True)
        opt2 = tr.Adam([q], lr=0.1)
        opt2.load_state(saved)
        assert opt2.slots[0].t == 1
        np.testing.assert_array_equal(opt2.slots[0].m, opt.slots[0].m)
        np.testing.assert_array_equal(opt2.slots[0].v, opt.slots[0].v)


class TestPriorGrad:
    def test_identical_batches_give_zero(self):
        rng = np.random.default_rng(0)
        prior = EBMPrior(3, 4, hidden=8, rng=rng)
        z = rng.standard_normal((5, 3))
        for g in tr.prior_grad(prior, z, z.copy()):
            np.testing.assert_allclose(g, 0.0, atol=1e-14)

    def test_single_class_degenerate(self):
        rng = np.random.default_rng(1)
        prior = EBMPrior(2, 1, hidden=6, rng=rng)
        z_pos = rng.standard_normal((4, 2))
        z_neg = rng.standard_normal((4, 2))
        grads = tr.prior_grad(prior, z_pos, z_neg)
        assert any(np.abs(g).max() > 0 for g in grads)

    def test_matches_direct_autodiff(self):
        rng = np.random.default_rng(2)
        prior = EBMPrior(2, 3, hidden=6, rng=rng)
        z_pos = rng.standard_normal((3, 2))
        z_neg = rng.standard_normal((4, 2))
        grads = tr.prior_grad(prior, z_pos, z_neg)
        params = prior.parameters()
        for p in params:
            p.grad = None
        with Tape() as tape:
            obj = ad.sub(ad.tmean(prior.marginal_energy(Tensor(z_pos))),
                         ad.tmean(prior.marginal_energy(Tensor(z_neg))))
            ad.backward(tape, obj)
        for g, p in zip(grads, params):
            np.testing.assert_allclose(g, p.grad, atol=1e-12)
            p.grad = None

    def test_does_not_clobber_existing_grads(self):
        rng = np.random.default_rng(3)
        prior = EBMPrior(2, 3, hidden=6, rng=rng)
        marker = [np.full_like(p.data, 7.0) for p in prior.parameters()]
        for p, m in zip(prior.parameters(), marker):
            p.grad = m
        tr.prior_grad(prior, rng.standard_normal((2, 2)),
                      rng.standard_normal((2, 2)))
        for p, m in zip(prior.parameters(), marker):
            np.testing.assert_array_equal(p.grad, m)

    def test_empty_batch_rejected(self):
        prior = EBMPrior(2, 3, hidden=6, rng=np.random.default_rng(4))
        with pytest.raises(InvalidBatch):
            tr.prior_grad(prior, np.zeros((0, 2)), np.zeros((1, 2)))

    def test_finite_difference(self):
        rng = np.random.default_rng(5)
        prior = EBMPrior(2, 3, hidden=6, rng=rng)
        z_pos = rng.standard_normal((3, 2))
        z_neg = rng.standard_normal((3, 2))
        grads = tr.prior_grad(prior, z_pos, z_neg)
        params = prior.parameters()
        h = 1e-6
        worst = 0.0
        check = np.random.default_rng(6)
        for p, g in zip(params, grads):
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in check.choice(flat.size, size=min(10, flat.size),
                                  replace=False):
                orig = flat[i]
                flat[i] = orig + h
                up = (prior.marginal_energy(Tensor(z_pos)).data.mean()
                      - prior.marginal_energy(Tensor(z_neg)).data.mean())
                flat[i] = orig - h
                dn = (prior.marginal_energy(Tensor(z_pos)).data.mean()
                      - prior.marginal_energy(Tensor(z_neg)).data.mean())
                flat[i] = orig
                fd = (up - dn) / (2 * h)
                worst = max(worst, abs(fd - gflat[i])
                            / max(abs(fd), abs(gflat[i]), 1e-8))
        assert worst <= 1e-4


class TestUnsupObjective:
    def test_reduces_to_vae_bound_plus_log_k(self, small_model):
        # zero final prior layer: energy term is exactly log K for every z,
        # so the objective is the plain variational bound shifted by log K
        rng = np.random.default_rng(7)
        _, posterior, decoder = small_model
        prior0 = EBMPrior(3, 4, hidden=12, rng=rng, zero_init=True)
        x = rng.standard_normal((6, 2))
        eps = rng.standard_normal((6, 3))
        obj = tr.unsup_psi_objective(posterior, decoder, prior0, x, eps).item()

        mu, logvar = posterior.encode(x)
        z = reparam_sample(mu, logvar, eps)
        vae = float(np.mean(decoder.log_likelihood(z, x).data
                            - ad.kl_diag_gaussians(mu, logvar).data))
        assert obj == pytest.approx(vae + math.log(4), abs=1e-12)

    def test_prior_receives_no_gradient(self, small_model):
        rng = np.random.default_rng(8)
        prior, posterior, decoder = small_model
        for p in prior.parameters():
            p.grad = None
        x = rng.standard_normal((4, 2))
        eps = rng.standard_normal((4, 3))
        with Tape() as tape:
            ad.backward(tape, tr.unsup_psi_objective(
                posterior, decoder, prior, x, eps))
        assert all(p.grad is None for p in prior.parameters())
        assert any(p.grad is not None for p in posterior.parameters())
        assert any(p.grad is not None for p in decoder.parameters())

    def test_finite_difference(self, small_model):
        rng = np.random.default_rng(9)
        prior, posterior, decoder = small_model
        x = rng.standard_normal((4, 2))
        eps = rng.standard_normal((4, 3))

        def f():
            return tr.unsup_psi_objective(posterior, decoder, prior, x, eps)

        params = posterior.parameters() + decoder.parameters()
        assert finite_diff_check(f, params, max_coords=100) <= 1e-5

    def test_batch_mismatch_rejected(self, small_model):
        prior, posterior, decoder = small_model
        with pytest.raises(InvalidBatch):
            tr.unsup_psi_objective(posterior, decoder, prior,
                                   np.zeros((3, 2)), np.zeros((4, 3)))


class TestSupervisedObjective:
    def test_uniform_classifier_gives_log_inverse_k(self):
        rng = np.random.default_rng(10)
        prior = EBMPrior(3, 4, hidden=8, rng=rng, zero_init=True)
        posterior = AmortizedPosterior(2, 3, hidden=8, rng=rng)
        x = rng.standard_normal((5, 2))
        y = np.array([0, 1, 2, 3, 0])
        eps = rng.standard_normal((1, 5, 3))
        obj = tr.supervised_objective(prior, posterior, x, y, eps).item()
        assert obj == pytest.approx(math.log(1 / 4), abs=1e-12)

    def test_saturated_correct_logit_is_near_zero(self):
        rng = np.random.default_rng(11)
        prior = EBMPrior(2, 2, hidden=4, rng=rng)
        # last layer biases dominate: class 0 logit +30, class 1 logit -30
        prior.net.weights[-1].data[:] = 0.0
        prior.net.biases[-1].data[:] = np.array([30.0, -30.0])
        posterior = AmortizedPosterior(2, 2, hidden=4, rng=rng)
        x = rng.standard_normal((3, 2))
        eps = rng.standard_normal((1, 3, 2))
        obj = tr.supervised_objective(prior, posterior, x,
                                      np.zeros(3, dtype=int), eps).item()
        assert -1e-12 >= obj >= -1e-20 or abs(obj) <= 1e-12

    def test_n_mc_one_matches_direct_formula(self, small_model):
        rng = np.random.default_rng(12)
        prior, posterior, _ = small_model
        x = rng.standard_normal((4, 2))
        y = np.array([0, 3, 1, 2])
        eps = rng.standard_normal((1, 4, 3))
        obj = tr.supervised_objective(prior, posterior, x, y, eps).item()
        mu, logvar = posterior.encode(x)
        z = reparam_sample(mu, logvar, eps[0])
        probs = prior.class_posterior(z).data
        direct = float(np.mean(np.log(probs[np.arange(4), y])))
        assert obj == direct

    def test_one_hot_labels_accepted(self, small_model):
        rng = np.random.default_rng(13)
        prior, posterior, _ = small_model
        x = rng.standard_normal((3, 2))
        y_int = np.array([2, 0, 1])
        y_hot = np.eye(4)[y_int]
        eps = rng.standard_normal((1, 3, 3))
        a = tr.supervised_objective(prior, posterior, x, y_int, eps).item()
        b = tr.supervised_objective(prior, posterior, x, y_hot, eps).item()
        assert a == b

    def test_label_out_of_range(self, small_model):
        prior, posterior, _ = small_model
        with pytest.raises(InvalidLabel):
            tr.supervised_objective(prior, posterior, np.zeros((1, 2)),
                                    np.array([4]), np.zeros((1, 1, 3)))

    def test_finite_difference(self, small_model):
        rng = np.random.default_rng(14)
        prior, posterior, _ = small_model
        x = rng.standard_normal((4, 2))
        y = np.array([1, 2, 0, 3])
        eps = rng.standard_normal((2, 4, 3))

        def f():
            return tr.supervised_objective(prior, posterior, x, y, eps,
                                           n_mc=2)

        params = prior.parameters() + posterior.parameters()
        assert finite_diff_check(f, params, max_coords=100) <= 1e-5

    def test_large_n_mc_matches_quadrature(self):
        # d=1 latent: E_q[softmax_true] computed by Monte Carlo with a big
        # sample must agree with Gaussian quadrature over q(z|x)
        rng = np.random.default_rng(15)
        prior = EBMPrior(1, 2, hidden=6, rng=rng)
        posterior = AmortizedPosterior(2, 1, hidden=6, rng=rng)
        x = rng.standard_normal((1, 2))
        y = np.array([1])
        n_mc = 4000
        eps = rng.standard_normal((n_mc, 1, 1))
        mc = math.exp(tr.supervised_objective(prior, posterior, x, y, eps,
                                              n_mc=n_mc).item())

        mu, logvar = posterior.encode(x)
        mu0 = mu.data[0, 0]
        sd0 = math.exp(0.5 * logvar.data[0, 0])
        grid = QuadratureGrid(dim=1)
        zs = grid.nodes[:, 0]
        q = np.exp(-0.5 * ((zs - mu0) / sd0) ** 2) / (
            sd0 * math.sqrt(2 * math.pi))
        p_true = prior.class_posterior(grid.nodes).data[:, 1]
        quad = float((q * p_true * grid.weights).sum())
        assert abs(mc - quad) <= 0.01


def _tiny_state(seed=0, **overrides):
    cfg_kwargs = dict(eta0=2e-4, eta1=1e-3, eta2=1e-3, batch_unlabeled=16,
                      batch_labeled=16, chain_count=32, langevin_steps=5,
                      step_size=0.3, seed=seed, n_mc_label=1)
    cfg_kwargs.update(overrides)
    cfg = tr.TrainConfig(**cfg_kwargs)
    rng = np.random.default_rng(seed + 100)
    prior = EBMPrior(2, 2, hidden=16, rng=rng)
    posterior = AmortizedPosterior(2, 2, hidden=16, rng=rng)
    decoder = Decoder(2, 2, hidden=16, rng=rng, sigma2=0.25)
    return tr.TrainState.create(cfg, prior, posterior, decoder)


def _two_blobs(rng, n=64):
    half = n // 2
    x = np.concatenate([
        rng.normal(loc=(-2.0, 0.0), scale=0.3, size=(half, 2)),
        rng.normal(loc=(2.0, 0.0), scale=0.3, size=(half, 2)),
    ])
    y = np.concatenate([np.zeros(half, dtype=int), np.ones(half, dtype=int)])
    return x, y


class TestTrainStep:
    def test_zero_learning_rates_keep_parameters_bit_identical(self):
        state = _tiny_state(eta0=0.0, eta1=0.0, eta2=0.0)
        before = [p.data.copy() for p in state.all_parameters()]
        rng = np.random.default_rng(20)
        x_u = rng.standard_normal((16, 2))
        x_l, y_l = _two_blobs(rng, 16)
        for _ in range(3):
            tr.train_step(state, x_u, x_l, y_l)
        for b, p in zip(before, state.all_parameters()):
            np.testing.assert_array_equal(b, p.data)
        assert state.iteration == 3

    def test_same_seed_bit_identical_training(self):
        rng = np.random.default_rng(21)
        x_u = rng.standard_normal((16, 2))
        x_l, y_l = _two_blobs(rng, 16)
        finals = []
        for _ in range(2):
            state = _tiny_state(seed=5)
            for _ in range(5):
                tr.train_step(state, x_u, x_l, y_l)
            finals.append([p.data.copy() for p in state.all_parameters()])
        for a, b in zip(*finals):
            np.testing.assert_array_equal(a, b)

    def test_supervised_training_separates_two_blobs(self):
        rng = np.random.default_rng(22)
        x, y = _two_blobs(rng, 64)
        state = _tiny_state(seed=3, eta2=3e-3)
        for _ in range(400):
            tr.train_step(state, x, x, y)
        mu, _ = state.posterior.encode(x)
        pred = state.prior.class_posterior(Tensor(mu.data)).data.argmax(axis=1)
        assert (pred == y).mean() == 1.0

    def test_elbo_improves_during_training(self):
        rng = np.random.default_rng(23)
        x, y = _two_blobs(rng, 64)
        state = _tiny_state(seed=4)
        eps = np.random.default_rng(99).standard_normal((64, 2))
        start = tr.step_metrics(state, x, eps)["elbo_est"]
        for _ in range(300):
            tr.train_step(state, x, x, y)
        end = tr.step_metrics(state, x, eps)["elbo_est"]
        assert end > start

    def test_metrics_keys(self):
        state = _tiny_state()
        rng = np.random.default_rng(24)
        x = rng.standard_normal((8, 2))
        eps = rng.standard_normal((8, 2))
        m = tr.step_metrics(state, x, eps)
        assert set(m) == {"recon", "kl_q_p0", "f_alpha_mean",
                          "chain_energy_mean", "elbo_est"}
        assert m["elbo_est"] == pytest.approx(
            m["recon"] - m["kl_q_p0"] + m["f_alpha_mean"])

    def test_negative_learning_rate_rejected(self):
        with pytest.raises(InvalidBatch):
            tr.TrainConfig(eta0=-1e-4)
