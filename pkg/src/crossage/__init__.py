"""Cross-age speaker verification toolkit: trial protocol mining from
age-labeled metadata and age-decoupled speaker embedding training."""

from .estimator import AdalEmbedder

__all__ = ["AdalEmbedder"]
__version__ = "0.1.0"
