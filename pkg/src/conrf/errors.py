"""Exception types shared across the package."""


class ConRFError(Exception):
    """Base class for all package errors."""


class SceneFormatError(ConRFError):
    """On-disk scene data is malformed or missing."""


class ConsistencyError(ConRFError):
    """Loaded pieces disagree (counts, shapes, manifests)."""


class CapabilityError(ConRFError):
    """An optional backend or weight file is unavailable."""


class ConfigError(ConRFError):
    """Invalid configuration or request."""
