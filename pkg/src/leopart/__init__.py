"""Dense clustering of spatial feature tokens with swapped prediction,
foreground extraction and co-occurrence community detection."""

__version__ = "0.1.0"
