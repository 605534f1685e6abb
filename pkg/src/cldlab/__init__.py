"""Critically-damped Langevin diffusion for score-based generative modelling."""

from .kernels import CldParams, CholeskyError, dsm_kernel, ell, forward_moments, hsm_kernel
from .mixtures import GaussianMixture, nine_gaussians

__all__ = [
    "CldParams",
    "CholeskyError",
    "GaussianMixture",
    "dsm_kernel",
    "ell",
    "forward_moments",
    "hsm_kernel",
    "nine_gaussians",
]
__version__ = "0.1.0"
