"""Multi-task hourglass segmentation with contour-based auxiliary tasks."""

__version__ = "0.1.0"
