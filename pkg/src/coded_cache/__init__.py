"""Coded edge caching with clustered LSTM forecasts and supervised DDPG placement."""

__version__ = "0.1.0"
