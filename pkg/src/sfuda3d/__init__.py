"""Source-free domain adaptation for 3D volumetric segmentation."""

__version__ = "0.1.0"
