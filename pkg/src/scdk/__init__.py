"""Streaming-CTC distillation kit at desk scale."""

__version__ = "0.1.0"
