"""Counterfactual sequence forecasting with disentangled latent factors."""

__version__ = "0.1.0"
