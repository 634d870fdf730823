"""Attention BiLSTM sequence-to-one forecasting of satellite pixel time series."""

__version__ = "0.1.0"
