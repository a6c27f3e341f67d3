"""Prompt-based class-incremental learning on a from-scratch tiny ViT."""

__version__ = "0.1.0"
