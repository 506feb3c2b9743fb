"""Temporal activity localization by language query with a cross-modal
temporal regression localizer."""

from .geometry import Interval, OffsetPair, iou, niol
from .model import CtrlConfig, CtrlModel

__version__ = "0.1.0"

__all__ = ["CtrlConfig", "CtrlModel", "Interval", "OffsetPair", "iou", "niol", "__version__"]
