"""Small-scale laboratory for likelihood and entropy dynamics in group-relative policy gradients."""

__version__ = "0.1.0"
