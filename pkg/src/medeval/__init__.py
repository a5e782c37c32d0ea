"""Evaluation harness for medical error detection and correction with LLMs."""

__version__ = "0.1.0"
