"""Lexicographic multi-objective reinforcement learning for finite MOMDPs."""

__version__ = "0.1.0"
