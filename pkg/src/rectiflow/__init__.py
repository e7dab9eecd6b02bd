"""Rectified-flow anomaly correction on autoencoder latents.

The velocity networks, autoencoder and optimiser all run on a small
reverse-mode autodiff engine written in numpy (:mod:`rectiflow.autodiff`).
"""

__version__ = "0.1.0"
