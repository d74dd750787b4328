"""Unified multi-dataset pedestrian attribute recognition at desk scale."""

__version__ = "0.1.0"
