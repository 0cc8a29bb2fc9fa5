"""Gated intermediate fusion, modality-utilization diagnostics and balanced training."""

__version__ = "0.1.0"
