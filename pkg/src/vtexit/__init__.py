"""Desk-scale laboratory for dynamic visual-token exit in a minimal
decoder-only multimodal transformer."""

__version__ = "0.1.0"
