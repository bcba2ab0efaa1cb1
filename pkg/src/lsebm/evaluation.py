"""Classification inference, accuracy, and verification oracles.

The oracles are deliberately independent of the training path: trapezoid
quadrature normalizes the latent prior in one or two dimensions, central
finite differences check every autodiff gradient, and the three-KL
perturbation diagnostic validates the overall learning objective on
quadrature-tractable toy models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import (InvalidInput, InvalidShape, NonDeterministicLoss,
                     NonFiniteInput, UnsupportedDimension)
from .nets import AmortizedPosterior, Decoder, EBMPrior

# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def classify(prior: EBMPrior, posterior: AmortizedPosterior, x, n_mc: int = 100,
             seed: int = 0):
    """Monte Carlo class probabilities averaged over posterior samples.

    probs = (1/n_mc) sum_j softmax(f(z_j)), z_j ~ q(z|x).  Returns
    (probs, argmax labels); single vectors give a (K,) row and an int.
    """
    if n_mc < 1:
        raise InvalidInput("n_mc must be >= 1")
    xa = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(xa)):
        raise NonFiniteInput("non-finite input")
    single = xa.ndim == 1
    xb = xa[None, :] if single else xa
    mu, logvar = posterior.encode(xb)
    std = np.exp(0.5 * logvar.data)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xC1)))
    probs = np.zeros((xb.shape[0], prior.k))
    for _ in range(n_mc):
        z = mu.data + std * rng.standard_normal(mu.data.shape)
        probs += prior.class_posterior(z).data
    probs /= n_mc
    labels = probs.argmax(axis=1)
    return (probs[0], int(labels[0])) if single else (probs, labels)


def accuracy(preds, labels) -> float:
    """Fraction of correct predictions."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise InvalidInput("prediction / label length mismatch")
    if preds.size == 0:
        raise InvalidInput("empty prediction set")
    if np.any(labels < 0):
        raise InvalidInput("labels must be non-negative")
    return float(np.mean(preds == labels))


# ---------------------------------------------------------------------------
# Quadrature oracle
# ---------------------------------------------------------------------------

@dataclass
class QuadratureGrid:
    """Trapezoid grid in 1 or 2 latent dimensions."""

    dim: int
    lo: float = -6.0
    hi: float = 6.0
    points_per_axis: int = 0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise UnsupportedDimension("quadrature supports d in {1, 2}")
        if self.points_per_axis == 0:
            self.points_per_axis = 512 if self.dim == 1 else 128
        if self.points_per_axis < 64:
            raise InvalidInput("need at least 64 points per axis")
        if self.lo > -4.0 or self.hi < 4.0:
            raise InvalidInput("grid must cover at least 4 reference sigmas")
        axis = np.linspace(self.lo, self.hi, self.points_per_axis)
        w = np.full(self.points_per_axis, axis[1] - axis[0])
        w[0] *= 0.5
        w[-1] *= 0.5
        if self.dim == 1:
            self.nodes = axis[:, None]
            self.weights = w
        else:
            gx, gy = np.meshgrid(axis, axis, indexing="ij")
            self.nodes = np.stack([gx.ravel(), gy.ravel()], axis=1)
            self.weights = np.outer(w, w).ravel()
        self.log_weights = np.log(self.weights)


def _log_ref(nodes: np.ndarray) -> np.ndarray:
    d = nodes.shape[1]
    return -0.5 * (nodes ** 2).sum(axis=1) - 0.5 * d * np.log(2.0 * np.pi)


def _logsumexp_np(a: np.ndarray) -> float:
    m = a.max()
    return float(m + np.log(np.exp(a - m).sum()))


def quadrature_log_Z(prior: EBMPrior, grid: QuadratureGrid) -> float:
    """log of the prior normalizer, integral of exp(energy) against N(0, I)."""
    if prior.d != grid.dim:
        raise UnsupportedDimension(
            f"grid dim {grid.dim} != latent dim {prior.d}")
    f = prior.marginal_energy(Tensor(grid.nodes)).data
    return _logsumexp_np(f + _log_ref(grid.nodes) + grid.log_weights)


def normalized_log_density(prior: EBMPrior, grid: QuadratureGrid) -> np.ndarray:
    """log of the quadrature-normalized prior density at the grid nodes."""
    f = prior.marginal_energy(Tensor(grid.nodes)).data
    log_z = _logsumexp_np(f + _log_ref(grid.nodes) + grid.log_weights)
    return f + _log_ref(grid.nodes) - log_z


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(loss_fn, params: list[Tensor], step: float = 1e-5,
                      max_coords: int = 200, seed: int = 0) -> float:
    """Worst relative error between autodiff and central differences.

    ``loss_fn()`` must rebuild the scalar loss from the params' current
    values and be deterministic; a random subset of at most
    ``max_coords`` coordinates is probed.
    """
    a = loss_fn().item()
    b = loss_fn().item()
    if a != b:
        raise NonDeterministicLoss("loss_fn gave two different values")

    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape() as tape:
        ad.backward(tape, loss_fn())
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
             for p in params]
    for p, s in zip(params, saved):
        p.grad = s

    coords = [(i, idx) for i, p in enumerate(params)
              for idx in range(p.data.size)]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xFD)))
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in pick]

    worst = 0.0
    for i, idx in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        up = loss_fn().item()
        flat[idx] = orig - step
        down = loss_fn().item()
        flat[idx] = orig
        fd = (up - down) / (2.0 * step)
        auto = grads[i].reshape(-1)[idx]
        rel = abs(fd - auto) / max(abs(fd), abs(auto), 1e-8)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Divergence-perturbation diagnostic
# ---------------------------------------------------------------------------

@dataclass
class ToyData:
    """Empirical points with a known generating density (for exact KLs)."""

    points: np.ndarray            # (N, D)
    log_density: object           # callable (N, D) -> (N,)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))


def _model_log_joint(prior: EBMPrior, decoder: Decoder,
                     grid: QuadratureGrid, x: np.ndarray) -> np.ndarray:
    """log[p_hat(z) p(x_i|z)] at every (node, point) pair: (N, n_nodes)."""
    log_prior = normalized_log_density(prior, grid)
    out = np.empty((x.shape[0], grid.nodes.shape[0]))
    zt = Tensor(grid.nodes)
    for i in range(x.shape[0]):
        xi = np.broadcast_to(x[i], (grid.nodes.shape[0], x.shape[1]))
        ll = decoder.log_likelihood(zt, xi).data
        out[i] = log_prior + ll
    return out


def exact_prior_density(prior: EBMPrior, grid: QuadratureGrid) -> np.ndarray:
    return np.exp(normalized_log_density(prior, grid))


def exact_posterior_density(prior: EBMPrior, decoder: Decoder,
                            grid: QuadratureGrid,
                            points: np.ndarray) -> np.ndarray:
    """Quadrature posterior over z for each point: (N, n_nodes)."""
    joint = _model_log_joint(prior, decoder, grid,
                             np.atleast_2d(np.asarray(points)))
    out = np.empty_like(joint)
    for i in range(joint.shape[0]):
        log_px = _logsumexp_np(joint[i] + grid.log_weights)
        out[i] = np.exp(joint[i] - log_px)
    return out


def divergence_perturbation(prior: EBMPrior, decoder: Decoder,
                            q_plus: np.ndarray, q_minus: np.ndarray,
                            toy_data: ToyData, grid: QuadratureGrid):
    """Three-KL diagnostic on a quadrature-tractable toy model.

    Returns (delta, terms) where delta = data KL + positive-phase KL -
    negative-phase KL.  ``q_plus`` is a (N, n_nodes) density matrix over
    the grid (one row per toy point), ``q_minus`` an (n_nodes,) density;
    both are held fixed while the model parameters vary, so the delta
    gradient can be compared against the plain likelihood gradient.
    """
    if prior.d != grid.dim or toy_data.points.shape[1] > 2:
        raise UnsupportedDimension("diagnostic needs d <= 2 and D <= 2")
    x = toy_data.points
    n_nodes = grid.nodes.shape[0]
    q_plus = np.asarray(q_plus, dtype=np.float64)
    q_minus = np.asarray(q_minus, dtype=np.float64)
    if q_plus.shape != (x.shape[0], n_nodes) or q_minus.shape != (n_nodes,):
        raise InvalidShape("sampler densities must live on the grid")

    joint = _model_log_joint(prior, decoder, grid, x)
    log_px = np.array([_logsumexp_np(joint[i] + grid.log_weights)
                       for i in range(x.shape[0])])

    kl_data = float(np.mean(toy_data.log_density(x) - log_px))

    # Positive phase: mean over toy points of KL(q_plus || posterior).
    kl_pos = 0.0
    for i in range(x.shape[0]):
        log_post = joint[i] - log_px[i]
        mask = q_plus[i] > 0
        kl_pos += float(np.sum(
            grid.weights[mask] * q_plus[i][mask]
            * (np.log(q_plus[i][mask]) - log_post[mask])))
    kl_pos /= x.shape[0]

    # Negative phase: KL(q_minus || prior) over the grid.
    log_prior = normalized_log_density(prior, grid)
    mask = q_minus > 0
    kl_neg = float(np.sum(
        grid.weights[mask] * q_minus[mask]
        * (np.log(q_minus[mask]) - log_prior[mask])))

    delta = kl_data + kl_pos - kl_neg
    return delta, {"kl_data": kl_data, "kl_positive": kl_pos,
                   "kl_negative": kl_neg}
