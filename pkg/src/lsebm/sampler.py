"""Langevin dynamics on the latent space.

Unadjusted Langevin (no Metropolis correction): the finite-step-size
bias is a known quantity and is tested, not corrected.  Persistent
chains survive across training iterations and provide the negative
phase of the prior update.  Sampling only reads a parameter snapshot;
it never touches network gradients or trainer state.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ChainDiverged, NonFiniteInput
from .nets import Decoder, EBMPrior

log = logging.getLogger(__name__)


class _frozen_params:
    """Temporarily clear requires_grad on network parameters.

    Score evaluations differentiate w.r.t. z only; they must not
    accumulate gradients into the parameters a trainer may be using.
    """

    def __init__(self, *nets):
        self.params = [p for net in nets for p in net.parameters()]

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self.saved):
            p.requires_grad = flag
        return False


def prior_score(prior: EBMPrior, z) -> np.ndarray:
    """grad_z log p(z) = grad_z logsumexp(f(z)) - z for the N(0, I) reference.

    Accepts a single vector or a (B, d) batch; returns the same shape.
    """
    za = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(za)):
        raise NonFiniteInput("non-finite latent state")
    single = za.ndim == 1
    zb = za[None, :] if single else za
    zt = Tensor(zb, requires_grad=True)
    with _frozen_params(prior), Tape() as tape:
        total = ad.tsum(prior.marginal_energy(zt))
        ad.backward(tape, total)
    grad_f = zt.grad if zt.grad is not None else np.zeros_like(zb)
    score = grad_f - zb
    return score[0] if single else score


def posterior_score(prior: EBMPrior, dec: Decoder, z, x) -> np.ndarray:
    """grad_z [logsumexp(f(z)) - |z|^2/2 + log p(x|z)]; diagnostics only."""
    za = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(za)):
        raise NonFiniteInput("non-finite latent state")
    single = za.ndim == 1
    zb = za[None, :] if single else za
    xa = np.asarray(x, dtype=np.float64)
    if xa.ndim == 1:
        xa = np.broadcast_to(xa, (zb.shape[0], xa.shape[0]))
    zt = Tensor(zb, requires_grad=True)
    with _frozen_params(prior, dec), Tape() as tape:
        total = ad.tsum(
            ad.add(prior.marginal_energy(zt), dec.log_likelihood(zt, xa))
        )
        ad.backward(tape, total)
    grad = zt.grad if zt.grad is not None else np.zeros_like(zb)
    score = grad - zb
    return score[0] if single else score


def langevin_step(z, score, s: float, noise, chain_index=None, iteration=None):
    """One unadjusted Langevin update: z + (s^2 / 2) * score + s * noise.

    ``noise`` is an external N(0, I) draw; it is scaled by s here.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        out = (np.asarray(z) + (s * s / 2.0) * np.asarray(score)
               + s * np.asarray(noise))
    if not np.all(np.isfinite(out)):
        raise ChainDiverged(chain_index, iteration)
    return out


class PersistentChains:
    """L latent vectors evolved by Langevin dynamics across iterations.

    Each chain owns an RNG stream keyed by (seed, chain index) so chain
    trajectories do not depend on batching or thread count.  States are
    initialized i.i.d. from the standard-normal reference.
    """

    def __init__(self, count: int, d: int, seed: int, step_size: float = 0.6,
                 steps_per_update: int = 20):
        self.count = count
        self.d = d
        self.seed = seed
        self.step_size = step_size
        self.steps_per_update = steps_per_update
        self.rngs = [
            np.random.default_rng(np.random.SeedSequence(entropy=(seed, i)))
            for i in range(count)
        ]
        self.states = np.stack([rng.standard_normal(d) for rng in self.rngs])

    def _advance_block(self, prior: EBMPrior, indices: np.ndarray):
        """Run steps_per_update Langevin steps on the selected chains."""
        s = self.step_size
        z = self.states[indices].copy()
        for t in range(self.steps_per_update):
            try:
                score = prior_score(prior, z)
            except NonFiniteInput:
                # Batch kernel refused; fall back to per-row scores so one
                # bad chain cannot take down the whole block.
                score = np.full_like(z, np.nan)
                for row in range(z.shape[0]):
                    try:
                        score[row] = prior_score(prior, z[row])
                    except NonFiniteInput:
                        pass
            for row, ci in enumerate(indices):
                if not np.all(np.isfinite(score[row])):
                    log.warning("chain %d diverged at step %d; reinitializing",
                                ci, t)
                    z[row] = self.rngs[ci].standard_normal(self.d)
                    continue
                noise = self.rngs[ci].standard_normal(self.d)
                try:
                    z[row] = langevin_step(z[row], score[row], s, noise,
                                           chain_index=ci, iteration=t)
                except ChainDiverged:
                    log.warning("chain %d diverged at step %d; reinitializing",
                                ci, t)
                    z[row] = self.rngs[ci].standard_normal(self.d)
        self.states[indices] = z
        return z

    def update(self, prior: EBMPrior, indices, threads: int = 1) -> np.ndarray:
        """Advance the selected chains; returns their post-update states.

        Per-chain RNG streams make the result independent of ``threads``.
        """
        indices = np.asarray(indices, dtype=np.intp)
        if indices.size == 0:
            return np.zeros((0, self.d))
        if np.any(indices < 0) or np.any(indices >= self.count):
            raise IndexError("chain index out of range")
        if self.steps_per_update == 0:
            return self.states[indices].copy()
        if threads <= 1 or indices.size < 2:
            return self._advance_block(prior, indices)
        blocks = np.array_split(indices, min(threads, indices.size))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(
                lambda b: self._advance_block(prior, b), blocks))
        return np.concatenate(results, axis=0)

    def energies(self, prior: EBMPrior) -> np.ndarray:
        """Marginal energy of every chain state (diagnostic)."""
        return np.asarray(prior.marginal_energy(Tensor(self.states)).data)
