"""Relation classification with Top-k label graphs on a synthetic long-tail corpus."""

__version__ = "0.1.0"
