"""Conditional WGAN-GP scenario generator for gridded climate indices."""
__version__ = "0.1.0"
