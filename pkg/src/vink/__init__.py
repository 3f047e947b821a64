"""Virtual-ink margin labeling for whole-slide images."""

__version__ = "0.1.0"
