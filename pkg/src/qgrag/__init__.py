"""Query-guided graph attention retrieval over chunked, embedded text."""

__version__ = "0.1.0"
