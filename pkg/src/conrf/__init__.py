"""Feature radiance fields with zero-shot global and local stylization."""

__version__ = "0.1.0"
