"""Multitask multimodal transformer trained end to end on synthetic tasks."""

__version__ = "0.1.0"
