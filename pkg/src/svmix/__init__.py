"""Selective volume mixup for video classification at desk scale."""

__version__ = "0.1.0"
