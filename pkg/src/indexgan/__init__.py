"""Adversarial multi-step forecasting of stock-index returns."""

__version__ = "0.1.0"
