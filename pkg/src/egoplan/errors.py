"""Exception types raised across the package."""


class EgoplanError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(EgoplanError, ValueError):
    pass


class UnknownTemplateError(EgoplanError, KeyError):
    pass


class DomainError(EgoplanError, ValueError):
    pass


class EmptyInputError(EgoplanError, ValueError):
    pass


class DegenerateLineError(EgoplanError, ValueError):
    pass


class ShapeError(EgoplanError, ValueError):
    pass


class SchemaError(EgoplanError, ValueError):
    """A scenario, plan or checkpoint file does not match its schema."""
