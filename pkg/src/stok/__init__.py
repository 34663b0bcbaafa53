"""Storage-efficient vision training on pre-extracted VQ tokens."""

__version__ = "0.1.0"
