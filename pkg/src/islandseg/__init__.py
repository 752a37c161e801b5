"""Shoreline segmentation of multispectral island scenes with a frozen ViT encoder
and a U-Net-style decoder."""

__version__ = "0.1.0"
