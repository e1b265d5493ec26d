"""Talking-head generation driven by audio and speech-related facial action units."""

__version__ = "0.1.0"
