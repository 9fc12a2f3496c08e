"""Dense float32 tensors with a fixed row-major layout.

Every array that crosses a module boundary (activations, weights, images
as float batches) is one of these. The flat buffer is little-endian
IEEE-754 float32 in row-major order, which is also the on-disk weight
blob layout, so inference is bit-portable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def _validate_shape(shape) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if len(dims) == 0:
        raise ValidationError("tensor shape must have at least one dimension")
    for d in dims:
        if d < 1:
            raise ValidationError(f"tensor dimensions must be >= 1, got {dims}")
    return dims


@dataclass(frozen=True)
class Tensor:
    """Immutable n-dimensional float32 array."""

    array: np.ndarray

    def __post_init__(self):
        arr = self.array
        if not isinstance(arr, np.ndarray):
            raise ValidationError("Tensor wraps a numpy array")
        _validate_shape(arr.shape)
        if arr.dtype != np.float32 or not arr.flags["C_CONTIGUOUS"]:
            object.__setattr__(self, "array", np.ascontiguousarray(arr, dtype=np.float32))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self.array.reshape(-1)

    def size(self) -> int:
        return int(self.array.size)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(_validate_shape(shape), dtype=np.float32))


def from_flat(shape, values) -> Tensor:
    dims = _validate_shape(shape)
    flat = np.asarray(values, dtype=np.float32).reshape(-1)
    expected = int(np.prod(dims))
    if flat.size != expected:
        raise ValidationError(f"shape {dims} needs {expected} values, got {flat.size}")
    return Tensor(flat.reshape(dims))


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Per-element `add`/`mul` of two equal-shape tensors, or
    `max-with-scalar` of a tensor against a scalar threshold."""
    if op == "max-with-scalar":
        return Tensor(np.maximum(a.array, np.float32(b)))
    if not isinstance(b, Tensor):
        raise ValidationError(f"binary op {op!r} needs a tensor second operand")
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return Tensor(a.array + b.array)
    if op == "mul":
        return Tensor(a.array * b.array)
    raise ValidationError(f"unknown elementwise op {op!r}")


def ravel_index(shape, coords) -> int:
    """Row-major linear index; inverse of unravel_index."""
    if len(shape) != len(coords):
        raise ValidationError("coordinate rank mismatch")
    idx = 0
    for dim, c in zip(shape, coords):
        if not 0 <= c < dim:
            raise ValidationError(f"coordinate {coords} out of range for {shape}")
        idx = idx * dim + c
    return idx


def unravel_index(shape, idx: int) -> tuple[int, ...]:
    coords = []
    for dim in reversed(shape):
        coords.append(idx % dim)
        idx //= dim
    return tuple(reversed(coords))


def save_tensor(path, t: Tensor) -> None:
    """Shape header line (ASCII dims) followed by the raw LE float32 blob."""
    with open(path, "wb") as fh:
        fh.write((" ".join(str(d) for d in t.shape) + "\n").encode("ascii"))
        fh.write(t.array.astype("<f4").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        dims = _validate_shape(header)
        blob = fh.read()
    expected = int(np.prod(dims)) * 4
    if len(blob) != expected:
        raise ValidationError(f"{path}: expected {expected} payload bytes, got {len(blob)}")
    return Tensor(np.frombuffer(blob, dtype="<f4").reshape(dims).copy())
