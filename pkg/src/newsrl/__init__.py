"""News-aware reinforcement-learning trading toolkit."""

__version__ = "0.1.0"
