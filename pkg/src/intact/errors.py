"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class RankError(ValueError):
    """Operation requires a scalar (rank-0) tensor."""


class EmptyInputError(ValueError):
    """Operation received an empty point set."""


class DataError(ValueError):
    """Non-finite or otherwise invalid numeric data."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class SeverityError(ValueError):
    """Perturbation severity would leave too few points to train on."""


class DomainError(ValueError):
    """Physical parameter outside its valid domain."""
