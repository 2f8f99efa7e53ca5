"""Joint embedding of spoken-word spectrograms and image regions."""

__version__ = "0.1.0"
