"""Cross-modal person detection benchmarking: evaluation, weak labels, fusion and losses."""

__version__ = "0.1.0"
