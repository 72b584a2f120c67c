"""Diffusion-based solvers for parametric constrained optimisation."""

__version__ = "0.1.0"
