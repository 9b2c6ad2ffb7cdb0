"""Edited-region mask annotation for image pairs: alignment, semantic masking, dataset construction."""

__version__ = "0.1.0"
