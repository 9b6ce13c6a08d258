"""Offline hierarchical goal-conditioned RL with conditional RealNVP policies."""

__version__ = "0.1.0"
