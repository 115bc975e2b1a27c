"""Look-ahead interpretability toolkit for square-per-token chess policy transformers."""

__version__ = "0.1.0"
