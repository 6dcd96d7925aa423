"""Neural hidden Markov models for discrete speech representation learning."""

__version__ = "0.1.0"
