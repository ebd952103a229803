"""Attention-head attribution workbench on a synthetic biography QA task."""

__version__ = "0.1.0"
