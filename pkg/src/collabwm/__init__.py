"""Collaborative speech watermarking: a vocoder trained jointly with a detector, through codec channels."""

__version__ = "0.1.0"
