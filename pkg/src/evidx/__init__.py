"""Per-image evidence masks for frozen image classifiers via activation matching."""

__version__ = "0.1.0"
