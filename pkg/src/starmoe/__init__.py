"""Expandable mixture-of-experts for class-incremental learning with
routing alignment and asymmetric capacity regularization."""

__version__ = "0.1.0"
