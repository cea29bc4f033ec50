"""Adversarial breast-ultrasound tumor segmentation and shape classification."""

__version__ = "0.1.0"
