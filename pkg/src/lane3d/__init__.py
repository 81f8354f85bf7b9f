"""Anchor-based 3D lane modeling with recurrent temporal feature fusion."""

__version__ = "0.1.0"
