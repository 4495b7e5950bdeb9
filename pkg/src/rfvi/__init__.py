"""Robust fitted value iteration for continuous-time control."""

__version__ = "0.1.0"
