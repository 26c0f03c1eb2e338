"""flowsentry: desk-scale malicious-traffic detection toolkit."""

__version__ = "0.1.0"
