"""Differentiable projector-camera systems: joint depth and shading learning."""

__version__ = "0.1.0"
