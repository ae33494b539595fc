"""Scaling-law tooling for tokenized joint motion forecasting and planning."""
__version__ = "0.1.0"
