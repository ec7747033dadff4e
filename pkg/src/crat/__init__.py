"""Composite-rotation auxiliary training and episodic few-shot evaluation."""

__version__ = "0.1.0"
