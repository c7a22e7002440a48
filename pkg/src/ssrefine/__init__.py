"""Contrastive refinement of synthetic scenes on a small autodiff core."""

__version__ = "0.1.0"
