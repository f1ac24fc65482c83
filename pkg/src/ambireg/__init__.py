"""Ambiguity-aware 2D/3D rigid registration with a conditional invertible network."""
__version__ = "0.1.0"
