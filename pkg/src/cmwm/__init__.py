"""Action-conditioned latent world model for periodic clinical trajectories."""

__version__ = "0.1.0"
