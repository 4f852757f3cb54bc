"""Exception types shared across the package."""


class FieldCascadeError(Exception):
    """Base class for all package errors."""


class ParameterError(FieldCascadeError, ValueError):
    """A parameter violates its documented range or consistency rule."""


class EmptyDomainError(FieldCascadeError, ValueError):
    """An operation requires at least one valid domain point and got none."""


class MaskMismatchError(FieldCascadeError, ValueError):
    """A sensor mask does not fit the grid or validity it is applied to."""


class SnapshotFormatError(FieldCascadeError, ValueError):
    """A snapshot or dataset file on disk is malformed or inconsistent."""


class CheckpointError(FieldCascadeError, ValueError):
    """A model checkpoint on disk is malformed or inconsistent."""


class NumericalError(FieldCascadeError, ArithmeticError):
    """A computation produced non-finite values."""


class TrainingDivergedError(FieldCascadeError, RuntimeError):
    """Training produced a non-finite loss."""


class FrozenParameterError(FieldCascadeError, RuntimeError):
    """Parameters that must stay frozen were mutated."""
