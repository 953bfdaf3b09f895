"""Quasilinear wave equations with null-form sources on perturbed Minkowski space."""

__version__ = "0.1.0"
