"""Independence testing for the clusterings of two data views."""

__version__ = "0.1.0"
