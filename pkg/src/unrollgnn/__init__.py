"""Graph message-passing layers derived from descent steps on energies."""

__version__ = "0.1.0"
