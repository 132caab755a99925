"""Differentially private captioner training: accounting, ghost clipping, DP-SGD, evaluation."""

__version__ = "0.1.0"
