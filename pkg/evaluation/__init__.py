"""Run metrics and per-condition aggregation."""
