class ModeKaczmarzError(Exception):
    """Base exception for the mode-Kaczmarz library."""
    pass

class InvalidProblemError(ModeKaczmarzError):
    """Raised when a linear system is malformed (dimensions, zero rows, inconsistent x_star)."""
    pass

class DataFormatError(InvalidProblemError):
    """Raised when a CSV file cannot be parsed into a numeric matrix."""

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column}")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")
        self.row = row
        self.column = column

class InvalidAdversaryError(ModeKaczmarzError):
    """Raised when category counts, fractions or error tables are inconsistent."""
    pass

class WorkerPoolExhaustedError(ModeKaczmarzError):
    """Raised when a row has fewer unblocked workers than the sample size."""

    def __init__(self, row: int, available: int, requested: int):
        super().__init__(
            f"Row {row}: only {available} unblocked workers left, {requested} requested"
        )
        self.row = row
        self.available = available
        self.requested = requested

class InvalidOptionsError(ModeKaczmarzError):
    """Raised when solver options are out of range."""
    pass

class BoundUndefinedError(ModeKaczmarzError):
    """Raised when a convergence bound is requested with a contraction factor outside (0, 1)."""
    pass

class ConfigError(ModeKaczmarzError):
    """Raised when an experiment configuration violates the schema."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field

class SerializationError(ModeKaczmarzError):
    """Raised when an artifact (JSON, CSV) cannot be written or read back."""
    pass

class UnknownReferenceTableError(ModeKaczmarzError):
    """Raised when a reference table id is not part of the stored data."""
    pass
