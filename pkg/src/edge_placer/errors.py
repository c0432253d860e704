"""Exception types shared across the package."""


class PlacerError(Exception):
    """Base class for every error raised by edge_placer."""


class SchemaError(PlacerError, ValueError):
    """A document does not match the expected schema."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DanglingReferenceError(PlacerError, ValueError):
    """A document references an id that was never defined."""


class ValidationError(PlacerError, ValueError):
    """A structurally valid document violates a semantic invariant."""


class ArityError(ValidationError):
    pass


class UnknownNodeError(PlacerError, KeyError):
    pass


class DomainError(PlacerError, ValueError):
    """An operation was called on the wrong kind of node or object."""


class InfeasibleError(PlacerError):
    """No placement satisfies the requested constraints."""

    def __init__(self, message, chain=None):
        super().__init__(message)
        self.chain = chain


class StateError(PlacerError):
    """A placement mutation precondition was not met."""


class ContractError(PlacerError):
    """A caller broke an operation's precondition."""


class DivergenceError(PlacerError):
    """Training produced a non-finite loss or gradient."""
