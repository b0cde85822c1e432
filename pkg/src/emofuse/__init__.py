"""Multimodal (rPPG + facial landmark) emotion classification toolkit."""

__version__ = "0.1.0"
