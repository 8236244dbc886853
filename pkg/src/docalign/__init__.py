"""Toolkit for turning a values document into grounded instruct and
preference datasets, verifying the alignment losses numerically, and
evaluating the resulting responses."""

__version__ = "0.1.0"
