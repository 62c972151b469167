"""Fusion of dense simulation-like and sparse measurement-like surface cp data."""
