"""Encoding-feature supervised UNet++ for liver and tumor segmentation."""

__version__ = "0.1.0"
