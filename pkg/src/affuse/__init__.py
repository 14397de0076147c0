"""Multimodal satisfaction classification with cross-modal affinity alignment."""

__version__ = "0.1.0"
