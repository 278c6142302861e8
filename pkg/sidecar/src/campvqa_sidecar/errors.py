from __future__ import annotations


class SidecarError(Exception):
    """Base class for sidecar failures."""


class EncoderError(SidecarError):
    """A pretrained model could not be loaded or run."""


class JobError(SidecarError):
    """Invalid or incomplete job description."""
