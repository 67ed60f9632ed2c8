class FeatsentError(Exception):
    """Base class for all package errors."""


class ShapeError(FeatsentError, ValueError):
    pass


class NonFiniteError(FeatsentError, ValueError):
    pass


class ProvenanceError(FeatsentError):
    """Artifacts that were produced from different upstream inputs were combined."""


class ConfigError(FeatsentError, ValueError):
    pass


class MissingArtifactError(FeatsentError):
    def __init__(self, message, command=None):
        super().__init__(message)
        self.command = command


class AttackFailure(FeatsentError):
    """Raised when an attack cannot produce any successful example."""
