"""Latent denoising of internal visual features in a toy multimodal model."""
from latent_denoising.kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
