"""Multimodal knowledge distillation on a synthetic action-recognition testbed."""

__version__ = "0.1.0"
