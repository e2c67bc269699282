"""Self-supervised incremental structure-from-motion with scene coordinate regression,
exercised on synthetic scenes with known ground truth."""

__version__ = "0.1.0"
