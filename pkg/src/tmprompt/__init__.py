"""Translation-memory prompting for autoregressive translation models."""

__version__ = "0.1.0"
