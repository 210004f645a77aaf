"""Fully convolutional data description: explainable one-class anomaly detection."""

__version__ = "0.1.0"
