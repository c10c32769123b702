"""Multimodal semi-supervised segmentation on disentangled anatomy/modality factors."""

__version__ = "0.1.0"
