"""Longitudinal fetal-brain morphometry toolkit on synthetic phantoms."""

__version__ = "0.1.0"
