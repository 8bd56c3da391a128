"""Calibration-error estimation, proper-score bounds, and recalibration."""

__version__ = "0.1.0"

from . import core, estimators, harness, recal, regress, scores, synth

__all__ = [
    "__version__",
    "core",
    "estimators",
    "harness",
    "recal",
    "regress",
    "scores",
    "synth",
]
