"""Encoder sidecar: runs the pretrained caption and embedding models for the
video quality pipeline and writes CVQF/caption files it can consume."""

__version__ = "0.1.0"
