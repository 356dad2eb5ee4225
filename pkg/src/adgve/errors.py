"""Exception hierarchy shared by every stage of the scoring pipeline."""


class AdgveError(Exception):
    """Base class; every error raised on purpose by this package derives from it."""


class SchemaError(AdgveError):
    """Annotation document is missing a field or has a field of the wrong type."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class RangeError(SchemaError):
    """A value is well-typed but outside its allowed range."""


class GeometryError(SchemaError):
    """Degenerate or self-intersecting geometry."""

    def __init__(self, path="", message="degenerate geometry"):
        super().__init__(path, message)


class InsufficientFrames(AdgveError):
    pass


class DegenerateLane(AdgveError):
    pass


class NoEvidence(AdgveError):
    """A score component has no valid samples to be computed from."""


class WeightError(AdgveError):
    pass


class TemplateError(AdgveError):
    pass


class ParseError(AdgveError):
    pass


class TransportError(AdgveError):
    pass


class BackendError(AdgveError):
    pass


class BackendUnavailable(AdgveError):
    pass


class DimensionError(AdgveError):
    pass


class InsufficientData(AdgveError):
    pass


class NonFiniteLoss(AdgveError):
    pass


class DegenerateInput(AdgveError):
    """Rank correlation requested for a constant input; ``value`` is the flagged fallback."""

    value = 0.0


class SpecError(AdgveError):
    pass


class EmptyInput(AdgveError):
    pass


class ConfigError(AdgveError):
    pass
