"""Reason-then-summarize rewards, GRPO and metrics for radiology report generation."""

__version__ = "0.1.0"
