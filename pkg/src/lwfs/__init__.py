"""Desk-scale lab for studying forgetting in code-switched sequence models."""

__version__ = "0.1.0"
