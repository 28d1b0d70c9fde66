"""Multistep generative backmapping of coarse-grained protein structures."""

__version__ = "0.1.0"
