"""Multi-domain calibration: metrics, calibrators, penalized training and invariance checks."""

__version__ = "0.1.0"
