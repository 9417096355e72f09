"""Multilingual knowledge graph completion with self-supervised adaptive graph alignment."""

__version__ = "0.1.0"
