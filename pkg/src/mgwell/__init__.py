"""Adaptive multi-grid reinforcement learning for robust optimal well control."""

__version__ = "0.1.0"
