"""Catheter-tip tracking with multi-template transformer fusion and mask-space flow."""

__version__ = "0.1.0"
