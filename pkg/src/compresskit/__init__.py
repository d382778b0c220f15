"""Desk-scale attention, pruning and distillation toolkit for fruit grading."""

__version__ = "0.1.0"
