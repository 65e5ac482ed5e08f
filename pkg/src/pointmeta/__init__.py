"""Few-shot meta-learning for point-cloud semantic segmentation."""

__version__ = "0.1.0"
