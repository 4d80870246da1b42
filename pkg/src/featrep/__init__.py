"""CNN feature representations reused by forests, linear SVMs and clustering."""

__version__ = "0.1.0"
