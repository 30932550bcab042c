"""Learned convolutional forward models for pulse-echo speed-of-sound imaging."""

__version__ = "0.1.0"
