"""Exceptions and input validation helpers shared by all modules."""

import numpy as np


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class ParseError(ValueError):
    """A text or binary file could not be parsed.

    ``line`` is set for text formats (1-based), ``offset`` for binary ones.
    """

    def __init__(self, message, line=None, offset=None):
        where = ""
        if line is not None:
            where = f"line {line}: "
        elif offset is not None:
            where = f"byte {offset}: "
        super().__init__(where + message)
        self.line = line
        self.offset = offset


class MeshIndexError(IndexError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class DegenerateMeshError(ContractViolation):
    """The mesh has no usable surface (zero total area or empty silhouette)."""


def check_points(points, name="points", allow_empty=True):
    """Return ``points`` as a float64 array of shape (n, 3), validating finiteness."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ContractViolation(f"{name} must have shape (n, 3), got {arr.shape}")
    if not allow_empty and len(arr) == 0:
        raise ContractViolation(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite coordinates")
    return arr


def check_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ContractViolation(f"rotation must be 3x3, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ContractViolation("rotation contains non-finite entries")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ContractViolation("matrix is not a proper rotation")
    return R


def check_same_shape(a, b, what="images"):
    if np.shape(a) != np.shape(b):
        raise ContractViolation(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def check_positive(value, name):
    if not value > 0:
        raise ContractViolation(f"{name} must be positive, got {value!r}")
    return value
