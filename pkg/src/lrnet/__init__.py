"""Localization-then-refinement change detection for bi-temporal imagery."""

from .model import LRNet, LRNetOutput, count_parameters

__version__ = "0.1.0"

__all__ = ["LRNet", "LRNetOutput", "count_parameters", "__version__"]
