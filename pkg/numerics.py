"""
Dense numeric kernels shared by the model, optimizer and metrics.

A Matrix is a 2-D numpy array in the active float width. Training runs in
32-bit; check mode (``MEDA_CHECK_MODE=1`` or :func:`check_mode`) switches the
whole stack to 64-bit so finite-difference gradient checks are meaningful.

Every kernel accumulates in a fixed order so that identical inputs give
bit-identical outputs; ``matmul`` in particular never dispatches to BLAS.
"""

import contextlib
from typing import Iterator, Sequence

import numpy as np

from config import CHECK_MODE
from errors import NumericError, RowIndexError, ShapeError

Matrix = np.ndarray

_state = {"check_mode": CHECK_MODE}


def is_check_mode() -> bool:
    return _state["check_mode"]


def set_check_mode(enabled: bool) -> None:
    _state["check_mode"] = bool(enabled)


@contextlib.contextmanager
def check_mode(enabled: bool = True) -> Iterator[None]:
    previous = _state["check_mode"]
    _state["check_mode"] = bool(enabled)
    try:
        yield
    finally:
        _state["check_mode"] = previous


def float_dtype() -> np.dtype:
    return np.dtype(np.float64 if _state["check_mode"] else np.float32)


def matrix(data, rows: int = None, cols: int = None) -> Matrix:
    """Build a Matrix in the active width, validating shape and finiteness."""
    arr = np.asarray(data, dtype=float_dtype())
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise ShapeError(f"data length {arr.size} != {rows}x{cols}")
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("matrix contains non-finite entries")
    return arr


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=float_dtype())


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product accumulated over k in ascending order."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def _check_rows(idx: np.ndarray, n_rows: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        bad = idx[(idx < 0) | (idx >= n_rows)][0]
        raise RowIndexError(f"row index {bad} out of range for {n_rows} rows")
    return idx


def gather_rows(table: Matrix, idx: Sequence[int]) -> Matrix:
    idx = _check_rows(idx, table.shape[0])
    return table[idx]


def scatter_add_rows(table: Matrix, idx: Sequence[int], grads: Matrix, inplace: bool = False) -> Matrix:
    """table[idx[i]] += grads[i]; duplicates accumulate in idx order."""
    idx = _check_rows(idx, table.shape[0])
    if grads.shape != (idx.size, table.shape[1]):
        raise ShapeError(f"grads shape {grads.shape} does not match ({idx.size}, {table.shape[1]})")
    out = table if inplace else table.copy()
    np.add.at(out, idx, grads)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 0:
        return sigmoid(x.reshape(1))[0]
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    neg = ~pos
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[neg])
    out[neg] = e / (1.0 + e)
    # NaN fails both comparisons above; propagate it
    nan = np.isnan(x)
    if nan.any():
        out[nan] = np.nan
    return out


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; all-masked rows give zeros."""
    masked = np.where(mask, scores, -np.inf)
    peak = masked.max(axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0)
    expd = np.exp(np.where(mask, scores - peak, -np.inf))
    total = expd.sum(axis=-1, keepdims=True)
    return np.divide(expd, total, out=np.zeros_like(expd), where=total > 0)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorized SplitMix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def keyed_uniform(seed: int, stream: int, keys: np.ndarray, width: int) -> np.ndarray:
    """
    Counter-based uniforms in [0, 1): entry (i, j) depends only on
    (seed, stream, keys[i], j), never on call order or batch composition.
    """
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
    base = splitmix64(np.array([seed & _MASK64], dtype=np.uint64))
    base = splitmix64(base ^ np.array([stream & _MASK64], dtype=np.uint64))
    row = splitmix64(base ^ splitmix64(keys))
    counters = np.arange(width, dtype=np.uint64) * _GOLDEN
    bits = splitmix64(splitmix64(row[:, None] ^ counters[None, :]))
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def assert_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
