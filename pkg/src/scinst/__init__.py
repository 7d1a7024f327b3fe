"""Arbitrary style transfer with SCIN, instance contrastive learning and a perception encoder."""

__version__ = "0.1.0"
