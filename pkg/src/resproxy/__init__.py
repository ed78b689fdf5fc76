"""Differentiable latent-ODE reservoir proxy and gradient-based history matching."""

__version__ = "0.1.0"
