"""Simulated optical tactile sensing, CNN pose regression, TPE search and PI servoing."""

__version__ = "0.1.0"
