"""Experiment matrix, summaries and the command-line surface."""
