"""Attention-based autonomous exploration on a collision-free graph, with conventional baselines."""

__version__ = "0.1.0"
