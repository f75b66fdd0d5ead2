"""Top-K classification losses, smoothing operators and the experiments built on them."""

__version__ = "0.3.0"
