"""Diffusion-guided agent-environment co-design."""

__version__ = "0.1.0"
