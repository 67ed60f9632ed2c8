"""Adversarial example detection by sentiment analysis of hidden-layer feature maps."""

__version__ = "0.1.0"
