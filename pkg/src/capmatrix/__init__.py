"""Capacity-matrix features and interpretable regression models for battery cycle-life prediction."""

__version__ = "0.1.0"
