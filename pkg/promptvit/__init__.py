"""Prompt-tuned vision transformers on a frozen desk-scale backbone."""

__version__ = "1.0.0"
