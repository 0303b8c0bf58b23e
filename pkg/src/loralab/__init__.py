"""Desk-scale LoRA laboratory: warm-up initialized adapters on a tiny transformer."""

__version__ = "0.1.0"
