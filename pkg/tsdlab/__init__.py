"""Desk-scale lab for task-specific directions in low-rank adaptation."""

__version__ = "0.1.0"
