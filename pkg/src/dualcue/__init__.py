"""Dual-branch competitive fine-tuning for face-forgery detection, with
evidential uncertainty fusion and uncertainty-adjusted threshold search."""

__version__ = "0.1.0"
