"""Weakly supervised dual-branch region model for image-level N / B / M classification."""

__version__ = "0.1.0"
