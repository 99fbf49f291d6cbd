"""Coarse-to-fine garment warping, conditional segmentation and texture
translation for image-based virtual try-on."""

__version__ = "0.1.0"
