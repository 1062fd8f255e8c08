"""Small-scale speech-to-text architecture comparisons on synthetic speech."""

__version__ = "0.1.0"
