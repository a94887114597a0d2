"""Joint video and 3D geometry generation in a shared latent space, at desk scale."""

__version__ = "0.1.0"
