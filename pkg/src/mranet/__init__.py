"""Modified residual attention network for histopathology image classification."""

__version__ = "0.1.0"
