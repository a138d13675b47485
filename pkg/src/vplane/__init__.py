"""Joint lane segmentation and vanishing-point heatmap regression."""
__version__ = "0.1.0"
