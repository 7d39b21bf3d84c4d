"""Unsupervised teacher-student beamforming for cell-free ISAC systems."""

__version__ = "0.1.0"
