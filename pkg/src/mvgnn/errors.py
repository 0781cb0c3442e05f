"""Exception hierarchy shared across the package."""


class MvgnnError(Exception):
    """Base class for all package errors."""


class ShapeError(MvgnnError):
    """Operand shapes incompatible with the requested operation."""

    def __init__(self, op, detail):
        super().__init__(f"{op}: {detail}")
        self.op = op


class IndexRangeError(MvgnnError):
    """Gather/scatter index outside the permitted range."""


class ContractError(MvgnnError):
    """A caller violated an API contract (wrong kind of argument, missing gradient, ...)."""


class InvalidGradeError(MvgnnError):
    """Grade outside 0..3."""


class InvalidMapError(MvgnnError):
    """A purported orthogonal map fails its orthogonality / determinant invariants."""


class SimulationDivergedError(MvgnnError):
    """Non-finite state encountered during integration."""

    def __init__(self, step):
        super().__init__(f"simulation diverged: non-finite state at step {step}")
        self.step = step


class GraphTooSmallError(MvgnnError):
    """Graph has too few nodes for the requested neighborhood size."""


class FormatError(MvgnnError):
    """On-disk container malformed (bad magic, version, or truncation)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
