"""Chunk-alignment distillation for long-context text embedding models."""

__version__ = "0.1.0"
