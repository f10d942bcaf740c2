"""Prototype VAE classifiers with orthonormality or volumetric diversity losses."""

__version__ = "0.1.0"
