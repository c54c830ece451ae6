"""Joint lesion image and mask synthesis with an adapted latent diffusion model."""

__version__ = "0.1.0"
