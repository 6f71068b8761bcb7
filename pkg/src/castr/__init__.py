"""Cascaded-transformer scene text recognition with a NumPy autodiff core."""

__version__ = "0.1.0"
