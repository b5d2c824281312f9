"""Exception types shared across the package."""


class GeometryError(ValueError):
    """A box violates a geometric precondition (e.g. degenerate side)."""


class ConfigurationError(ValueError):
    """Invalid model / experiment configuration."""


class ShapeError(ValueError):
    """Array shape does not match the declared contract."""


class SchemaError(ValueError):
    """A JSON record violates the annotation / prediction schema."""
