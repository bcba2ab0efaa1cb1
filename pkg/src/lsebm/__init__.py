"""Semi-supervised learning with an energy-tilted latent prior.

A dense latent vector and a one-hot class label are coupled through a
small energy network, so the latent prior doubles as a classifier.
Training combines a variational bound on unlabeled data, persistent
Langevin chains for the prior's negative phase, and a supervised term on
the labeled subset.
"""

__version__ = "0.1.0"
