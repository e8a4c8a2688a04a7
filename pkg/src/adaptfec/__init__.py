"""Trace-driven adaptive FEC: GE loss channels, LSTM loss-count prediction, RS redundancy."""

__version__ = "0.1.0"
