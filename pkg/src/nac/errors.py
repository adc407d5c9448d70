"""Exception types shared across modules."""


class ShapeError(ValueError):
    """Tensor or input shapes are inconsistent."""


class ConfigError(ValueError):
    """A hyperparameter or configuration value is out of range."""
