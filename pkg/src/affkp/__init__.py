"""Affordance keypoint detection on synthetic RGB-D tabletop scenes."""

__version__ = "0.1.0"
