import numpy as np
import pytest

from lsebm.nets import AmortizedPosterior, Decoder, EBMPrior


def rng_for(seed):
    return np.random.default_rng(seed)


@pytest.fixture
def small_model():
    """A tiny random model: d=3 latent, 4 classes, 2-D observations."""
    rng = np.random.default_rng(7)
    prior = EBMPrior(3, 4, hidden=12, rng=rng)
    posterior = AmortizedPosterior(2, 3, hidden=10, rng=rng)
    decoder = Decoder(3, 2, hidden=10, rng=rng, sigma2=0.25)
    return prior, posterior, decoder
