"""Label-aware ranked metric learning for radar people counting."""

__version__ = "0.1.0"
