"""Joint training loop for prior, decoder and encoder.

Every iteration runs, in order: persistent-chain Langevin updates on the
latent prior (negative phase), reparameterized posterior sampling,
a prior update from the positive/negative phase difference of the
marginal energy, an encoder+decoder update on the variational bound,
and a supervised update of prior and encoder on the labeled batch.
All three updates use Adam with independent moment state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import InvalidBatch, InvalidLabel, InvalidShape, NonFiniteGradient
from .nets import (AmortizedPosterior, Decoder, EBMPrior, reparam_sample,
                   xavier_normal)
from .sampler import PersistentChains

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 4000
    eta0: float = 2e-4          # prior
    eta1: float = 1e-4          # encoder + decoder
    eta2: float = 1e-4          # supervised term
    batch_unlabeled: int = 100  # m
    batch_labeled: int = 100    # n (capped at the labeled-set size)
    chain_count: int = 1000     # L
    langevin_steps: int = 20    # T_LD
    step_size: float = 0.6      # s
    seed: int = 0
    n_mc_label: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if min(self.eta0, self.eta1, self.eta2) < 0:
            raise InvalidBatch("learning rates must be non-negative")
        if self.batch_unlabeled < 1 or self.batch_labeled < 1:
            raise InvalidBatch("batch sizes must be >= 1")
        if self.langevin_steps < 0:
            raise InvalidBatch("langevin_steps must be >= 0")


def xavier_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Xavier-normal weight tensor for a (fan_out, fan_in) shape."""
    return xavier_normal(shape, rng)


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(slot: AdamSlot, param: np.ndarray, grad: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """One Adam update (descent direction); returns the new parameter value."""
    if grad.shape != param.shape:
        raise InvalidShape("gradient / parameter shape mismatch")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("non-finite gradient")
    slot.t += 1
    slot.m = beta1 * slot.m + (1.0 - beta1) * grad
    slot.v = beta2 * slot.v + (1.0 - beta2) * grad * grad
    m_hat = slot.m / (1.0 - beta1 ** slot.t)
    v_hat = slot.v / (1.0 - beta2 ** slot.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a fixed parameter list, reading each Tensor's .grad.

    ``maximize=True`` ascends the objective.  A non-finite gradient skips
    that parameter's update and logs a warning.
    """

    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 maximize: bool = False):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.maximize = maximize
        self.slots = [AdamSlot(np.zeros_like(p.data), np.zeros_like(p.data))
                      for p in params]

    def step(self):
        for p, slot in zip(self.params, self.slots):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.maximize:
                g = -g
            try:
                p.data = adam_step(slot, p.data, g, self.lr,
                                   self.beta1, self.beta2, self.eps)
            except NonFiniteGradient:
                log.warning("non-finite gradient; parameter update skipped")

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state(self) -> dict:
        return {
            "t": [s.t for s in self.slots],
            "m": [s.m.copy() for s in self.slots],
            "v": [s.v.copy() for s in self.slots],
        }

    def load_state(self, state: dict):
        for slot, t, m, v in zip(self.slots, state["t"], state["m"],
                                 state["v"]):
            slot.t = int(t)
            slot.m = np.asarray(m, dtype=np.float64).reshape(slot.m.shape)
            slot.v = np.asarray(v, dtype=np.float64).reshape(slot.v.shape)


# ---------------------------------------------------------------------------
# Gradient estimators
# ---------------------------------------------------------------------------

class _frozen:
    """Temporarily clear requires_grad on a parameter list."""

    def __init__(self, params):
        self.params = params

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p, s in zip(self.params, self.saved):
            p.requires_grad = s
        return False


def prior_grad(prior: EBMPrior, z_pos: np.ndarray,
               z_neg: np.ndarray) -> list[np.ndarray]:
    """Ascent gradient on the prior parameters.

    mean marginal energy over posterior samples minus mean over the
    persistent negative-phase samples; returned aligned with
    ``prior.parameters()``.
    """
    z_pos = np.atleast_2d(np.asarray(z_pos, dtype=np.float64))
    z_neg = np.atleast_2d(np.asarray(z_neg, dtype=np.float64))
    if z_pos.shape[0] == 0 or z_neg.shape[0] == 0:
        raise InvalidBatch("empty positive or negative batch")
    params = prior.parameters()
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape() as tape:
        obj = ad.sub(ad.tmean(prior.marginal_energy(Tensor(z_pos))),
                     ad.tmean(prior.marginal_energy(Tensor(z_neg))))
        ad.backward(tape, obj)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
             for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    return grads


def unsup_psi_objective(posterior: AmortizedPosterior, decoder: Decoder,
                        prior: EBMPrior, x_batch: np.ndarray,
                        eps_batch: np.ndarray) -> Tensor:
    """Single-sample reparameterized bound for the encoder/decoder update.

    mean over the batch of [log p(x|z) - KL(q(z|x) || N(0, I)) + energy(z)]
    with z = mu + sigma * eps.  The prior parameters are held constant;
    gradients reach them only through the next update's own pass.
    """
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    eps_batch = np.atleast_2d(np.asarray(eps_batch, dtype=np.float64))
    if x_batch.shape[0] != eps_batch.shape[0]:
        raise InvalidBatch("one eps row per observation required")
    with _frozen(prior.parameters()):
        mu, logvar = posterior.encode(x_batch)
        z = reparam_sample(mu, logvar, eps_batch)
        recon = decoder.log_likelihood(z, x_batch)
        kl = ad.kl_diag_gaussians(mu, logvar)
        energy = prior.marginal_energy(z)
        return ad.tmean(ad.add(ad.sub(recon, kl), energy))


def _labels_as_ints(y, k: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape[1] != k or not np.allclose(y.sum(axis=1), 1.0):
            raise InvalidLabel("malformed one-hot labels")
        y = y.argmax(axis=1)
    y = y.astype(np.intp)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise InvalidLabel(f"label out of range [0, {k})")
    return y


def supervised_objective(prior: EBMPrior, posterior: AmortizedPosterior,
                         x_lab: np.ndarray, y_lab, eps: np.ndarray,
                         n_mc: int = 1) -> Tensor:
    """Labeled-data log-probability of the true class under the model.

    mean over the batch of log[(1/n_mc) sum_j softmax(f(z_j))_{true}],
    z_j reparameterized posterior samples; with n_mc=1 this is the plain
    cross-entropy of the latent classifier at the posterior sample.
    Gradients flow to both the prior head and the encoder.
    """
    if n_mc < 1:
        raise InvalidBatch("n_mc must be >= 1")
    x_lab = np.atleast_2d(np.asarray(x_lab, dtype=np.float64))
    b = x_lab.shape[0]
    if b == 0:
        raise InvalidBatch("empty labeled batch")
    y = _labels_as_ints(y_lab, prior.k)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != (n_mc, b, posterior.d):
        raise InvalidShape(f"eps must have shape ({n_mc}, {b}, {posterior.d})")
    mu, logvar = posterior.encode(x_lab)
    acc = None
    for j in range(n_mc):
        z = reparam_sample(mu, logvar, eps[j])
        p_true = ad.take_per_row(prior.class_posterior(z), y)
        acc = p_true if acc is None else ad.add(acc, p_true)
    return ad.tmean(ad.log((1.0 / n_mc) * acc))


# ---------------------------------------------------------------------------
# Training state and step
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    config: TrainConfig
    prior: EBMPrior
    posterior: AmortizedPosterior
    decoder: Decoder
    chains: PersistentChains
    opt_prior: Adam
    opt_psi: Adam
    opt_sup: Adam
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, config: TrainConfig, prior: EBMPrior,
               posterior: AmortizedPosterior, decoder: Decoder):
        chains = PersistentChains(
            config.chain_count, prior.d, seed=config.seed,
            step_size=config.step_size,
            steps_per_update=config.langevin_steps)
        kw = dict(beta1=config.beta1, beta2=config.beta2,
                  eps=config.adam_eps, maximize=True)
        return cls(
            config=config, prior=prior, posterior=posterior, decoder=decoder,
            chains=chains,
            opt_prior=Adam(prior.parameters(), config.eta0, **kw),
            opt_psi=Adam(decoder.parameters() + posterior.parameters(),
                         config.eta1, **kw),
            opt_sup=Adam(prior.parameters() + posterior.parameters(),
                         config.eta2, **kw),
            rng=np.random.default_rng(
                np.random.SeedSequence(entropy=(config.seed, 0x7261))),
        )

    def all_parameters(self) -> list[Tensor]:
        return (self.prior.parameters() + self.decoder.parameters()
                + self.posterior.parameters())


def posterior_samples(posterior: AmortizedPosterior, x: np.ndarray,
                      eps: np.ndarray) -> np.ndarray:
    """Plain-value reparameterized samples (no tape)."""
    mu, logvar = posterior.encode(np.atleast_2d(x))
    return mu.data + np.exp(0.5 * logvar.data) * eps


def train_step(state: TrainState, x_unlab: np.ndarray, x_lab: np.ndarray,
               y_lab, threads: int = 1) -> TrainState:
    """One full iteration over an unlabeled and a labeled mini-batch."""
    cfg = state.config
    x_unlab = np.atleast_2d(np.asarray(x_unlab, dtype=np.float64))
    m = x_unlab.shape[0]
    d = state.prior.d

    # Negative phase: advance randomly picked persistent chains.
    idx = state.rng.choice(cfg.chain_count, size=min(m, cfg.chain_count),
                           replace=False)
    z_neg = state.chains.update(state.prior, idx, threads=threads)

    # Positive phase: reparameterized posterior samples.
    eps = state.rng.standard_normal((m, d))
    z_pos = posterior_samples(state.posterior, x_unlab, eps)

    # Prior update.
    if cfg.eta0 > 0:
        grads = prior_grad(state.prior, z_pos, z_neg)
        for p, g in zip(state.prior.parameters(), grads):
            p.grad = g
        state.opt_prior.step()
        state.opt_prior.zero_grad()

    # Encoder + decoder update on the variational bound.
    if cfg.eta1 > 0:
        state.opt_psi.zero_grad()
        with Tape() as tape:
            obj = unsup_psi_objective(state.posterior, state.decoder,
                                      state.prior, x_unlab, eps)
            ad.backward(tape, obj)
        state.opt_psi.step()
        state.opt_psi.zero_grad()

    # Supervised update of prior head and encoder.
    x_lab = np.atleast_2d(np.asarray(x_lab, dtype=np.float64))
    if cfg.eta2 > 0 and x_lab.shape[0] > 0:
        eps_sup = state.rng.standard_normal(
            (cfg.n_mc_label, x_lab.shape[0], d))
        state.opt_sup.zero_grad()
        with Tape() as tape:
            obj = supervised_objective(state.prior, state.posterior, x_lab,
                                       y_lab, eps_sup, cfg.n_mc_label)
            ad.backward(tape, obj)
        state.opt_sup.step()
        state.opt_sup.zero_grad()

    state.iteration += 1
    return state


def step_metrics(state: TrainState, x_unlab: np.ndarray,
                 eps: np.ndarray) -> dict:
    """Forward-only training diagnostics on one unlabeled batch."""
    mu, logvar = state.posterior.encode(np.atleast_2d(x_unlab))
    z = reparam_sample(mu, logvar, eps)
    recon = float(np.mean(state.decoder.log_likelihood(z, x_unlab).data))
    kl = float(np.mean(ad.kl_diag_gaussians(mu, logvar).data))
    f_mean = float(np.mean(state.prior.marginal_energy(z).data))
    chain_energy = float(np.mean(state.chains.energies(state.prior)))
    return {
        "recon": recon,
        "kl_q_p0": kl,
        "f_alpha_mean": f_mean,
        "chain_energy_mean": chain_energy,
        "elbo_est": recon - kl + f_mean,
    }
