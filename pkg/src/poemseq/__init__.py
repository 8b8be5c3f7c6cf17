"""Turn poems into sequences of mutually consistent images."""

__version__ = "0.1.0"
