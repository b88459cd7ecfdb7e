"""Hearing-loss music evaluation toolkit: listeners, NAL-R, car scenes, scoring."""

__version__ = "0.1.0"
