"""Patch-contrastive anomaly detection and segmentation.

Per-class models are trained on defect-free images with a directional
patch-prediction InfoNCE objective; at test time the same loss, evaluated
against a bank of clean training embeddings, serves directly as the
anomaly score for detection and pixel-level segmentation.
"""

__version__ = "0.1.0"
