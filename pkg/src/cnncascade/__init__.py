"""Compact convolutional network cascade for frontal face detection."""

__version__ = "0.1.0"
