"""Transformer forecasting trained on randomly sampled, non-consecutive windows."""

__version__ = "0.1.0"
