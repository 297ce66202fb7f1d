"""shapedis: implicit SDF shape modeling with a disentangling latent stage."""

__version__ = "0.1.0"
