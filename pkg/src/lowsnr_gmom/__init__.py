"""Low-SNR generalized method of moments for Gaussian latent-variable models."""

__version__ = "0.1.0"
