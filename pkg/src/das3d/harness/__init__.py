"""Synthetic scenes, training loops, evaluation and the command line."""
