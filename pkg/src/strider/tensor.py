"""Dense numeric substrate: 4-D tensors, 2-D matrices, matrix multiply.

Shape conventions used by every module downstream:

* ``Tensor4`` -- float ndarray of shape ``(n, c, h, w)``: batch, channel,
  height, width, row-major.
* ``Matrix`` -- 2-D float ndarray, row-major.

Both are plain numpy arrays validated at construction boundaries; the
training path uses float32 throughout.  ``gemm`` delegates to numpy's
BLAS-backed ``matmul`` (accumulation is at least single precision); the
test suite pins it against a naive triple-loop reference.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

DTYPE = np.float32


def tensor4(values, dims=None, dtype=DTYPE) -> np.ndarray:
    """Build a validated (n, c, h, w) tensor from values (reshaped if flat)."""
    arr = np.asarray(values, dtype=dtype)
    if dims is not None:
        if arr.size != int(np.prod(dims)):
            raise ShapeError(f"got {arr.size} values for dims {tuple(dims)}")
        arr = arr.reshape(dims)
    return as_tensor4(arr)


def as_tensor4(arr: np.ndarray) -> np.ndarray:
    if arr.ndim != 4:
        raise ShapeError(f"Tensor4 must be 4-D, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"Tensor4 dims must all be >= 1, got {arr.shape}")
    return arr


def matrix(values, rows=None, cols=None, dtype=DTYPE) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if rows is not None:
        if arr.size != rows * cols:
            raise ShapeError(f"got {arr.size} values for {rows}x{cols} matrix")
        arr = arr.reshape(rows, cols)
    return as_matrix(arr)


def as_matrix(arr: np.ndarray) -> np.ndarray:
    if arr.ndim != 2:
        raise ShapeError(f"Matrix must be 2-D, got shape {arr.shape}")
    return arr


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b with explicit shape validation.

    result[i, j] = sum_k a[i, k] * b[k, j]; shape (a.rows, b.cols).
    """
    a = as_matrix(np.asarray(a))
    b = as_matrix(np.asarray(b))
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"gemm dimension mismatch: {a.shape[0]}x{a.shape[1]} @ "
            f"{b.shape[0]}x{b.shape[1]}"
        )
    return a @ b
