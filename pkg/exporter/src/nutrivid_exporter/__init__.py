"""Frozen-backbone image embedding exporter for the VNEM interchange format."""

__version__ = "0.1.0"
