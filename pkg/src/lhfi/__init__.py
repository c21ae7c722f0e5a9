"""Latent health factor index: Bayesian hierarchical model, sampler and diagnostics."""

__version__ = "0.1.0"
