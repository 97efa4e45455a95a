"""lakc: a linear-algebra kernel compiler and blocked-algorithm deriver."""

__version__ = "0.1.0"
