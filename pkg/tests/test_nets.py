import math

import numpy as np
import pytest

from lsebm import autodiff as ad
from lsebm.autodiff import Tape, Tensor, backward
from lsebm.errors import InvalidInput, InvalidShape
from lsebm.evaluation import finite_diff_check
from lsebm.nets import (AmortizedPosterior, Decoder, EBMPrior, reparam_sample,
                        xavier_normal)


class TestEbmLogits:
    def test_zero_final_layer_gives_zero_logits(self):
        prior = EBMPrior(3, 4, hidden=8, rng=np.random.default_rng(0),
                         zero_init=True)
        out = prior.logits(np.array([0.3, -0.2, 1.0]))
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_hand_set_linear_evaluation(self):
        # single effective linear map: hide the hidden layers behind identity
        prior = EBMPrior(1, 2, hidden=1, rng=np.random.default_rng(0),
                         activation="tanh")
        # force: h = tanh(z*1 + 0), logits = [h, -h] approx linear near 0;
        # instead hand-set an exactly linear path with the last layer only
        prior.net.weights[0].data[:] = 1.0
        prior.net.biases[0].data[:] = 0.0
        prior.net.weights[1].data[:] = 1.0
        prior.net.biases[1].data[:] = 0.0
        prior.net.weights[2].data[:] = np.array([[1.0, -1.0]])
        prior.net.biases[2].data[:] = 0.0
        out = prior.logits(np.array([0.5])).data
        h = math.tanh(math.tanh(0.5))
        np.testing.assert_allclose(out, [h, -h], atol=1e-15)

    def test_dimension_mismatch(self):
        prior = EBMPrior(3, 2, hidden=4, rng=np.random.default_rng(1))
        with pytest.raises(InvalidShape):
            prior.logits(np.zeros(5))

    def test_gradient_wrt_z_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        prior = EBMPrior(3, 4, hidden=10, rng=rng)
        z = Tensor(rng.standard_normal(3), requires_grad=True)
        w = rng.uniform(-1, 1, size=4)

        def f():
            return ad.tsum(ad.mul(prior.logits(z), Tensor(w)))

        assert finite_diff_check(f, [z]) <= 1e-5


class TestClassPosterior:
    def test_uniform_when_logits_equal(self):
        prior = EBMPrior(2, 5, hidden=6, rng=np.random.default_rng(3),
                         zero_init=True)
        p = prior.class_posterior(np.zeros(2)).data
        np.testing.assert_allclose(p, 0.2, atol=1e-15)

    def test_exact_softmax_arithmetic(self):
        p = ad.softmax(Tensor([math.log(3), 0.0])).data
        np.testing.assert_allclose(p, [0.75, 0.25], atol=1e-14)

    def test_argmax_consistency(self):
        rng = np.random.default_rng(4)
        prior = EBMPrior(3, 6, hidden=10, rng=rng)
        for _ in range(20):
            z = rng.standard_normal(3)
            assert (prior.class_posterior(z).data.argmax()
                    == prior.logits(z).data.argmax())


class TestMarginalEnergy:
    def test_constant_logits(self):
        prior = EBMPrior(2, 10, hidden=6, rng=np.random.default_rng(5),
                         zero_init=True)
        assert prior.marginal_energy(np.zeros(2)).item() == pytest.approx(
            math.log(10), abs=1e-12)

    def test_single_class_degenerate(self):
        rng = np.random.default_rng(6)
        prior = EBMPrior(2, 1, hidden=6, rng=rng)
        z = rng.standard_normal(2)
        assert prior.marginal_energy(z).item() == pytest.approx(
            prior.logits(z).data[0])

    def test_energy_minus_max_bounded(self):
        rng = np.random.default_rng(7)
        prior = EBMPrior(3, 5, hidden=10, rng=rng)
        for _ in range(100):
            z = rng.standard_normal(3)
            gap = prior.marginal_energy(z).item() - prior.logits(z).data.max()
            assert 0.0 <= gap <= math.log(5)

    def test_bit_equality_with_logsumexp_of_logits(self):
        rng = np.random.default_rng(8)
        prior = EBMPrior(3, 5, hidden=10, rng=rng)
        z = rng.standard_normal((6, 3))
        a = prior.marginal_energy(z).data
        b = ad.logsumexp(prior.logits(z)).data
        np.testing.assert_array_equal(a, b)

    def test_exp_energy_equals_sum_exp_logits(self):
        rng = np.random.default_rng(9)
        prior = EBMPrior(2, 4, hidden=8, rng=rng)
        for _ in range(50):
            z = 3.0 * rng.standard_normal(2)
            logits = prior.logits(z).data
            assert np.all(np.abs(logits) < 20)
            lhs = math.exp(prior.marginal_energy(z).item())
            rhs = np.exp(logits).sum()
            assert abs(lhs - rhs) / rhs <= 1e-12

    def test_score_expectation_identity(self):
        # grad_z of the marginal energy equals the softmax-weighted sum of
        # per-class logit gradients
        rng = np.random.default_rng(10)
        prior = EBMPrior(3, 4, hidden=10, rng=rng)
        for _ in range(10):
            z = rng.standard_normal(3)
            zt = Tensor(z[None, :], requires_grad=True)
            with Tape() as tape:
                backward(tape, ad.tsum(prior.marginal_energy(zt)))
            direct = zt.grad[0]
            probs = prior.class_posterior(z).data
            expect = np.zeros(3)
            for cls in range(4):
                zc = Tensor(z[None, :], requires_grad=True)
                with Tape() as tape:
                    backward(tape, ad.tsum(
                        ad.slice_cols(prior.logits(zc), cls, cls + 1)))
                expect += probs[cls] * zc.grad[0]
            np.testing.assert_allclose(direct, expect, atol=1e-10)


class TestEncoder:
    def test_zero_init_matches_reference_prior(self):
        enc = AmortizedPosterior(2, 3, hidden=6, rng=np.random.default_rng(11),
                                 zero_init=True)
        mu, logvar = enc.encode(np.array([1.0, -2.0]))
        np.testing.assert_array_equal(mu.data, np.zeros(3))
        np.testing.assert_array_equal(logvar.data, np.zeros(3))

    def test_logvar_clamped(self):
        enc = AmortizedPosterior(1, 1, hidden=4, rng=np.random.default_rng(12))
        enc.net.weights[-1].data[:] = 0.0
        enc.net.biases[-1].data[:] = np.array([0.0, 50.0])
        _, logvar = enc.encode(np.array([1.0]))
        assert logvar.data[0] == 10.0

    def test_deterministic_limit(self):
        enc = AmortizedPosterior(1, 2, hidden=4, rng=np.random.default_rng(13))
        enc.net.weights[-1].data[:] = 0.0
        enc.net.biases[-1].data[:] = np.array([0.5, -0.5, -50.0, -50.0])
        mu, logvar = enc.encode(np.array([0.3]))
        eps = np.array([2.0, -3.0])
        z = reparam_sample(mu, logvar, eps)
        dev = np.abs(z.data - mu.data)
        assert np.all(dev <= math.exp(-5.0) * np.abs(eps) * (1 + 1e-12))

    def test_gradient_through_downstream_loss(self):
        rng = np.random.default_rng(14)
        enc = AmortizedPosterior(2, 3, hidden=8, rng=rng)
        x = rng.standard_normal((4, 2))
        eps = rng.standard_normal((4, 3))

        def f():
            mu, logvar = enc.encode(x)
            z = reparam_sample(mu, logvar, eps)
            return ad.tmean(ad.mul(z, z))

        assert finite_diff_check(f, enc.parameters(), max_coords=80) <= 1e-5


class TestReparamSample:
    def test_zero_eps(self):
        mu = Tensor([1.0, 2.0])
        z = reparam_sample(mu, Tensor([0.3, -0.7]), np.zeros(2))
        np.testing.assert_array_equal(z.data, mu.data)

    def test_standard_normal_passthrough(self):
        eps = np.array([0.5, -1.5])
        z = reparam_sample(Tensor(np.zeros(2)), Tensor(np.zeros(2)), eps)
        np.testing.assert_array_equal(z.data, eps)

    def test_monte_carlo_moments(self):
        rng = np.random.default_rng(15)
        eps = rng.standard_normal((100_000, 1))
        z = reparam_sample(Tensor(np.ones((100_000, 1))),
                           Tensor(np.full((100_000, 1), math.log(4))), eps)
        assert z.data.mean() == pytest.approx(1.0, abs=0.02)
        assert z.data.var() == pytest.approx(4.0, abs=0.1)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidShape):
            reparam_sample(Tensor([0.0]), Tensor([0.0, 0.0]), np.zeros(1))


class TestDecoder:
    def test_gaussian_zero_residual(self):
        rng = np.random.default_rng(16)
        dec = Decoder(3, 2, hidden=6, rng=rng, sigma2=0.25)
        z = rng.standard_normal(3)
        x = dec.mean(z).data
        ll = dec.log_likelihood(z, x).item()
        assert ll == pytest.approx(-math.log(2 * math.pi * 0.25), abs=1e-12)
        assert ll == pytest.approx(-0.4515827053, abs=1e-9)

    def test_gaussian_maximized_at_mean(self):
        rng = np.random.default_rng(17)
        dec = Decoder(2, 2, hidden=6, rng=rng)
        z = rng.standard_normal(2)
        x_star = dec.mean(z).data
        best = dec.log_likelihood(z, x_star).item()
        for _ in range(20):
            assert dec.log_likelihood(z, x_star + 0.1 *
                                      rng.standard_normal(2)).item() < best

    def test_multinomial_uniform_logits(self):
        dec = Decoder(2, 5, hidden=6, variant="multinomial",
                      rng=np.random.default_rng(18), zero_init=True)
        counts = np.array([3.0, 0, 1, 0, 2])
        ll = dec.log_likelihood(np.zeros(2), counts).item()
        assert ll == pytest.approx(counts.sum() * math.log(1 / 5), abs=1e-12)

    def test_multinomial_negative_counts_rejected(self):
        dec = Decoder(2, 4, hidden=6, variant="multinomial",
                      rng=np.random.default_rng(19))
        with pytest.raises(InvalidInput):
            dec.log_likelihood(np.zeros(2), np.array([1.0, -1, 0, 0]))

    def test_wrong_length_rejected(self):
        dec = Decoder(2, 4, hidden=6, rng=np.random.default_rng(20))
        with pytest.raises(InvalidShape):
            dec.log_likelihood(np.zeros(2), np.zeros(3))

    def test_gradient_wrt_parameters(self):
        rng = np.random.default_rng(21)
        dec = Decoder(3, 2, hidden=8, rng=rng)
        z = rng.standard_normal((4, 3))
        x = rng.standard_normal((4, 2))

        def f():
            return ad.tmean(dec.log_likelihood(z, x))

        assert finite_diff_check(f, dec.parameters(), max_coords=80) <= 1e-5

    def test_invalid_variant(self):
        with pytest.raises(InvalidInput):
            Decoder(2, 2, variant="poisson")
        with pytest.raises(InvalidInput):
            Decoder(2, 2, sigma2=0.0)


class TestXavier:
    def test_empirical_std(self):
        w = xavier_normal((200, 200), np.random.default_rng(22))
        target = math.sqrt(2.0 / 400.0)
        assert abs(w.std() - target) / target <= 0.10

    def test_bias_exactly_zero(self):
        prior = EBMPrior(3, 4, hidden=16, rng=np.random.default_rng(23))
        for b in prior.net.biases:
            np.testing.assert_array_equal(b.data, 0.0)

    def test_same_seed_bit_identical(self):
        a = xavier_normal((50, 30), np.random.default_rng(24))
        b = xavier_normal((50, 30), np.random.default_rng(24))
        np.testing.assert_array_equal(a, b)
