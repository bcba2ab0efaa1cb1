"""Model networks: latent energy head, encoder, decoder.

The generative model is a latent-variable model whose prior over the
latent vector z is tilted by a small MLP producing K class logits; the
log-sum-exp of those logits is the marginal energy of z, and their
softmax is a classifier in latent space.  The decoder maps z to the
observation (Gaussian or unigram-multinomial likelihood), and a
diagonal-Gaussian encoder amortizes posterior inference.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInput, InvalidShape

LOGVAR_CLAMP = 10.0


def xavier_normal(shape, rng: np.random.Generator) -> np.ndarray:
    """Xavier-normal weight draw: i.i.d. N(0, 2 / (fan_in + fan_out))."""
    fan_out, fan_in = shape
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=(fan_out, fan_in))


class MLP:
    """Fully connected stack with a linear final layer.

    Weights are stored (fan_in, fan_out) so a batch row-matrix maps by
    plain matmul.  Activation is tanh or relu on all hidden layers.
    """

    def __init__(self, widths, activation: str = "relu", rng=None,
                 zero_last: bool = False):
        if len(widths) < 2:
            raise InvalidShape("MLP needs at least input and output widths")
        if activation not in ("tanh", "relu"):
            raise InvalidInput(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        n_layers = len(widths) - 1
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            if zero_last and i == n_layers - 1:
                w = np.zeros((fi, fo))
            else:
                w = xavier_normal((fo, fi), rng).T
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fo), requires_grad=True))

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        return params

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        act = ad.tanh if self.activation == "tanh" else ad.relu
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i != last:
                h = act(h)
        return h


def _as_batch(z) -> tuple[Tensor, bool]:
    """Promote a 1-D vector to a single-row batch; report whether we did."""
    t = z if isinstance(z, Tensor) else Tensor(z)
    if t.data.ndim == 1:
        return ad.reshape(t, (1, t.data.shape[0])), True
    if t.data.ndim == 2:
        return t, False
    raise InvalidShape("expected a vector or a batch of vectors")


class EBMPrior:
    """Energy-tilted latent prior: p(z) ∝ exp(logsumexp(f(z))) N(z; 0, I).

    ``f`` maps R^d to K class logits; its softmax is the latent-space
    classifier, its log-sum-exp the marginal energy.  The reference
    measure is a fixed standard normal with no learned parameters.
    """

    def __init__(self, d: int, k: int, hidden: int = 200, rng=None,
                 activation: str = "tanh", zero_init: bool = False):
        self.d = d
        self.k = k
        self.net = MLP([d, hidden, hidden, k], activation=activation, rng=rng,
                       zero_last=zero_init)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def logits(self, z) -> Tensor:
        """The K logit scores f(z); differentiable w.r.t. z and parameters."""
        zb, single = _as_batch(z)
        if zb.data.shape[1] != self.d:
            raise InvalidShape(
                f"latent dim {zb.data.shape[1]} != {self.d}"
            )
        out = self.net(zb)
        return ad.reshape(out, (self.k,)) if single else out

    def class_posterior(self, z) -> Tensor:
        """softmax(f(z)): class probabilities given the latent vector."""
        return ad.softmax(self.logits(z))

    def marginal_energy(self, z) -> Tensor:
        """logsumexp over the K logits; scalar for a vector, (B,) for a batch."""
        return ad.logsumexp(self.logits(z))


class AmortizedPosterior:
    """Diagonal-Gaussian encoder q(z|x) = N(mu(x), diag(exp(logvar(x))))."""

    def __init__(self, in_dim: int, d: int, hidden: int = 200, rng=None,
                 activation: str = "relu", zero_init: bool = False):
        self.in_dim = in_dim
        self.d = d
        self.net = MLP([in_dim, hidden, hidden, 2 * d], activation=activation,
                       rng=rng, zero_last=zero_init)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def encode(self, x) -> tuple[Tensor, Tensor]:
        """Return (mu, logvar); logvar is clamped to +-LOGVAR_CLAMP."""
        xb, single = _as_batch(x)
        if xb.data.shape[1] != self.in_dim:
            raise InvalidShape(
                f"input dim {xb.data.shape[1]} != {self.in_dim}"
            )
        h = self.net(xb)
        mu = ad.slice_cols(h, 0, self.d)
        logvar = ad.clamp(ad.slice_cols(h, self.d, 2 * self.d),
                          -LOGVAR_CLAMP, LOGVAR_CLAMP)
        if single:
            mu = ad.reshape(mu, (self.d,))
            logvar = ad.reshape(logvar, (self.d,))
        return mu, logvar


def reparam_sample(mu: Tensor, logvar: Tensor, eps) -> Tensor:
    """z = mu + exp(logvar / 2) * eps, differentiable w.r.t. mu and logvar.

    eps is an external N(0, I) draw supplied by the caller so tests and
    training loops stay deterministic.
    """
    eps = np.asarray(eps, dtype=np.float64)
    if mu.data.shape != logvar.data.shape or mu.data.shape != eps.shape:
        raise InvalidShape("mu, logvar and eps must share one shape")
    return ad.add(mu, ad.mul(ad.exp(0.5 * logvar), Tensor(eps)))


class Decoder:
    """Observation model g(z) with Gaussian or multinomial likelihood.

    gaussian: x = g(z) + noise, noise ~ N(0, sigma2 I); sigma2 is a fixed
    assumed value, constant during training.
    multinomial: g(z) are V word logits, x a non-negative count vector;
    the likelihood is the unigram log-probability of the counts.
    """

    def __init__(self, d: int, out_dim: int, hidden: int = 200,
                 variant: str = "gaussian", sigma2: float = 0.25, rng=None,
                 activation: str = "relu", zero_init: bool = False):
        if variant not in ("gaussian", "multinomial"):
            raise InvalidInput(f"unknown decoder variant {variant!r}")
        if sigma2 <= 0:
            raise InvalidInput("sigma2 must be positive")
        self.d = d
        self.out_dim = out_dim
        self.variant = variant
        self.sigma2 = float(sigma2)
        self.net = MLP([d, hidden, hidden, out_dim], activation=activation,
                       rng=rng, zero_last=zero_init)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def mean(self, z) -> Tensor:
        """g(z): decoded mean (gaussian) or word logits (multinomial)."""
        zb, single = _as_batch(z)
        if zb.data.shape[1] != self.d:
            raise InvalidShape(f"latent dim {zb.data.shape[1]} != {self.d}")
        out = self.net(zb)
        return ad.reshape(out, (self.out_dim,)) if single else out

    def log_likelihood(self, z, x) -> Tensor:
        """log p(x|z); scalar for a single (z, x), (B,) for batches."""
        zb, single = _as_batch(z)
        xa = np.asarray(x, dtype=np.float64)
        if xa.ndim == 1:
            xa = xa[None, :]
        if xa.shape != (zb.data.shape[0], self.out_dim):
            raise InvalidShape(
                f"observation shape {xa.shape} incompatible with "
                f"({zb.data.shape[0]}, {self.out_dim})"
            )
        g = self.net(zb)
        if self.variant == "gaussian":
            ll = ad.gaussian_log_prob_rows(xa, g, self.sigma2)
        else:
            ll = ad.multinomial_log_prob_rows(xa, g)
        return ad.reshape(ll, ()) if single else ll
