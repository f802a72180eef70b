"""EEG / speech-envelope match-mismatch classification toolkit."""

__version__ = "0.1.0"
