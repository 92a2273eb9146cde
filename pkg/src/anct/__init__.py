"""Attention-enhanced multi-task scoring of lung-nodule attributes."""

__version__ = "0.1.0"
