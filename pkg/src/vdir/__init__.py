"""Variational deep image denoiser: latent-conditioned blind denoising trained on a variational lower bound."""

__version__ = "0.1.0"

from .networks import NetworkConfig, VDID, build_networks, count_parameters  # noqa: E402,F401
