"""Deterministic dense/sparse linear algebra kernel.

Dense matrices are plain 2-D numpy arrays (float32 by default, switchable to
float64 for verification runs). Sparse binary matrices store per-row sorted
active-column indices; they never carry values. All products accumulate in
float64 before casting back, which makes the sparse row-sum path bitwise
identical to the densified matrix product for 0/1 inputs and keeps results
run-to-run reproducible for a fixed thread configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

_dtype = DEFAULT_DTYPE


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InvariantError(RuntimeError):
    """An internal numeric invariant was violated (non-finite values, bad indices)."""


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created matrices (float32 or float64)."""
    global _dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _dtype = dtype.type


def default_dtype():
    return _dtype


class use_dtype:
    """Context manager that temporarily switches the default dtype."""

    def __init__(self, dtype):
        self.dtype = dtype
        self._saved = None

    def __enter__(self):
        self._saved = _dtype
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


def as_matrix(data, dtype=None) -> np.ndarray:
    """Coerce nested lists / arrays to a 2-D matrix of the default dtype."""
    out = np.asarray(data, dtype=dtype or _dtype)
    if out.ndim == 1:
        out = out.reshape(1, -1)
    if out.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={out.ndim}")
    return out


def check_finite(m: np.ndarray, label: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise InvariantError(f"{label} contains NaN or Inf")
    return m


@dataclass
class SparseBinaryMatrix:
    """Batch of rows encoded as sets of active column indices.

    Semantically equal to a 0/1 dense matrix. Row index arrays are sorted
    strictly increasing with every index < cols.
    """

    rows: int
    cols: int
    row_indices: list = field(repr=False)

    def __post_init__(self):
        if self.rows != len(self.row_indices):
            raise ShapeError(
                f"rows={self.rows} but {len(self.row_indices)} index lists given"
            )
        normalized = []
        for i, idx in enumerate(self.row_indices):
            arr = np.asarray(idx, dtype=np.int64)
            if arr.ndim != 1:
                raise ShapeError(f"row {i}: indices must be 1-D")
            if arr.size:
                if arr.min() < 0 or arr.max() >= self.cols:
                    raise ShapeError(
                        f"row {i}: index out of range for cols={self.cols}"
                    )
                if np.any(np.diff(arr) <= 0):
                    raise ShapeError(
                        f"row {i}: indices must be strictly increasing (no duplicates)"
                    )
            normalized.append(arr)
        self.row_indices = normalized

    @classmethod
    def from_sets(cls, sets, cols: int) -> "SparseBinaryMatrix":
        """Build from an iterable of index collections (sorted internally)."""
        rows = [np.array(sorted(set(int(j) for j in s)), dtype=np.int64) for s in sets]
        return cls(rows=len(rows), cols=cols, row_indices=rows)

    @classmethod
    def from_dense(cls, dense) -> "SparseBinaryMatrix":
        d = np.asarray(dense)
        rows = [np.flatnonzero(d[i]).astype(np.int64) for i in range(d.shape[0])]
        return cls(rows=d.shape[0], cols=d.shape[1], row_indices=rows)

    def densify(self, dtype=None) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=dtype or _dtype)
        for i, idx in enumerate(self.row_indices):
            out[i, idx] = 1
        return out

    def take_rows(self, order) -> "SparseBinaryMatrix":
        order = np.asarray(order, dtype=np.int64)
        return SparseBinaryMatrix(
            rows=len(order),
            cols=self.cols,
            row_indices=[self.row_indices[i] for i in order],
        )

    @property
    def nnz(self) -> int:
        return sum(len(idx) for idx in self.row_indices)

    def __eq__(self, other):
        if not isinstance(other, SparseBinaryMatrix):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and all(
                np.array_equal(a, b)
                for a, b in zip(self.row_indices, other.row_indices)
            )
        )


class SeededRng:
    """Deterministic random source: same seed, same stream, any platform.

    Wraps a PCG64 generator. `child(*keys)` derives an independent stream so
    subsystems (init, shuffling, dropout) cannot perturb each other's draws.
    Single-owner: not safe to share across threads.
    """

    def __init__(self, seed: int, _spawn_key=()):
        self.seed = int(seed)
        self._spawn_key = tuple(int(k) for k in _spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, _spawn_key=self._spawn_key + tuple(keys))

    def normal(self, rows: int, cols: int, mean: float = 0.0, stddev: float = 1.0,
               dtype=None) -> np.ndarray:
        if stddev < 0:
            raise ValueError(f"stddev must be >= 0, got {stddev}")
        sample = self._gen.standard_normal((rows, cols))
        return (mean + stddev * sample).astype(dtype or _dtype)

    def uniform(self, rows: int, cols: int | None = None) -> np.ndarray:
        """U[0,1) floats: 2-D (rows, cols), or 1-D length rows when cols is None."""
        if cols is None:
            return self._gen.random(rows)
        return self._gen.random((rows, cols))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int | None = None, replace: bool = True):
        """Uniform draw from range(n): one int when size is None, else an array."""
        if size is None:
            return int(self._gen.integers(0, n))
        return self._gen.choice(n, size=size, replace=replace)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, cast back to a's dtype."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out64 = np.matmul(a.astype(np.float64, copy=False),
                          b.astype(np.float64, copy=False))
    out = out64.astype(a.dtype if a.dtype in (np.float32, np.float64) else _dtype)
    return check_finite(out, "matmul result")


def sparse_dense_product(s: SparseBinaryMatrix, w: np.ndarray) -> np.ndarray:
    """Row i of the result is the sum of w's rows at s's active indices.

    Both this and matmul(s.densify(), w) accumulate the selected weights in
    float64 and round once to the working dtype, so in the float32 default
    they produce identical bytes; in float64 builds the two summation orders
    may differ in the last unit of the 53-bit mantissa.
    """
    w = np.asarray(w)
    if w.ndim != 2 or s.cols != w.shape[0]:
        raise ShapeError(
            f"cannot multiply sparse ({s.rows}, {s.cols}) x dense {w.shape}"
        )
    w64 = w.astype(np.float64, copy=False)
    out64 = np.zeros((s.rows, w.shape[1]), dtype=np.float64)
    for i, idx in enumerate(s.row_indices):
        if idx.size:
            out64[i] = np.add.reduce(w64[idx], axis=0)
    out = out64.astype(w.dtype if w.dtype in (np.float32, np.float64) else _dtype)
    return check_finite(out, "sparse product result")


def sparse_transpose_dense_product(s: SparseBinaryMatrix, d: np.ndarray) -> np.ndarray:
    """densify(s).T @ d with exact float64 accumulation (used by backprop)."""
    d = np.asarray(d)
    if d.ndim != 2 or s.rows != d.shape[0]:
        raise ShapeError(
            f"cannot multiply sparse.T ({s.cols}, {s.rows}) x dense {d.shape}"
        )
    dense64 = s.densify(dtype=np.float64)
    out64 = np.matmul(dense64.T, d.astype(np.float64, copy=False))
    return out64.astype(d.dtype if d.dtype in (np.float32, np.float64) else _dtype)


def sample_gaussian(rng: SeededRng, rows: int, cols: int, mean: float = 0.0,
                    stddev: float = 1.0) -> np.ndarray:
    """I.i.d. normal matrix; deterministic for a given rng state."""
    return rng.normal(rows, cols, mean=mean, stddev=stddev)
