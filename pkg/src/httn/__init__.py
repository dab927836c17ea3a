"""Hierarchical temporal tuning for episodic few-shot video recognition."""

__version__ = "0.1.0"
