"""Feedback-free MCS selection lab for multi-user massive MIMO."""

__version__ = "0.1.0"
