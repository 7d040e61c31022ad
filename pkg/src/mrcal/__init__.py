"""Ordinal-consensus calibrated segmentation training and multi-rater
calibration evaluation."""

__version__ = "0.1.0"

from . import core, fusion, metrics, model, ordinal, synthgen  # noqa: F401
