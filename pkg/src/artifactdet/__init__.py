"""Few-shot visual artifact classification and segmentation on a frozen dual encoder."""

__version__ = "0.1.0"
