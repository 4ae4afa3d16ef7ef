"""Recover sparse ODE models from a single measured coordinate.

The pipeline: delay-embed the scalar signal into a Hankel matrix, compress
with an autoencoder (optionally after an SVD pre-projection), and fit sparse
polynomial dynamics in the latent coordinates, all trained jointly so the
discovered equations and the embedding agree with each other.
"""

from . import dynsys, hankel, sindy, neural, delaymodel, cli

__all__ = ["dynsys", "hankel", "sindy", "neural", "delaymodel", "cli"]
__version__ = "0.1.0"
