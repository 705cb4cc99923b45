"""Dichotomies with respect to general growth rates."""

__version__ = "0.1.0"
