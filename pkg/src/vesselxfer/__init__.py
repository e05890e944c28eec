"""Annotation-free coronary vessel segmentation by fusing retinal annotations into angiograms."""

__version__ = "0.1.0"
