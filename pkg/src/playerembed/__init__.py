"""Self-supervised player embeddings from game event logs."""

__version__ = "0.1.0"
