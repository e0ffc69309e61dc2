"""Label-aware self-supervised pre-training for language identification."""

__version__ = "0.1.0"
