"""Triplane pretraining by masked rendering, and keyframe action decoding."""

__version__ = "0.1.0"
