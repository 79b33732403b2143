"""Exception taxonomy shared across the package."""


class MoeReidError(Exception):
    """Base class for all package errors."""


class ShapeError(MoeReidError):
    """Operands have incompatible or invalid shapes."""


class ConfigError(MoeReidError):
    """A configuration value violates its contract."""


class InvariantError(MoeReidError):
    """A runtime invariant (e.g. simplex weights) was violated."""


class NumericError(MoeReidError):
    """A computation produced a non-finite value."""


class FormatError(MoeReidError):
    """A file does not conform to its declared binary format."""


class TruncationError(FormatError):
    """Declared dimensions are inconsistent with the payload length."""


class UnsupportedDtypeError(FormatError):
    """The file declares a dtype this build does not support."""


class LabelError(MoeReidError):
    """A class label is out of range."""


class ContractError(MoeReidError):
    """The caller violated an operation precondition."""


class SamplingError(MoeReidError):
    """The dataset cannot satisfy a sampling request."""


class DivergenceError(MoeReidError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class MetadataError(MoeReidError):
    """Required record metadata is missing."""


class DegenerateInputError(MoeReidError):
    """An input is degenerate for the requested operation (e.g. zero vector)."""


class EmptyInputError(MoeReidError):
    """An operation received an empty collection."""
