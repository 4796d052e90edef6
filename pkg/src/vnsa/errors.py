class ShapeError(ValueError):
    """Tensor dimensions do not line up."""


class EmptySupportError(ValueError):
    """A softmax was asked to normalise over zero unmasked entries."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class ConfigError(ValueError):
    """Invalid run configuration or inconsistent fixtures."""
