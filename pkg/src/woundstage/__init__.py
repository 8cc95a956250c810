"""Wound-healing stage classification, saliency maps and collagen coherency."""

__version__ = "0.1.0"
