"""Coordinate-wise vector operations shared by every optimizer.

Dense vectors are plain float64 ``numpy`` arrays. Sparse vectors carry
ascending unique indices, values and the ambient dimension.
"""

from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


def as_dense(a) -> np.ndarray:
    out = np.asarray(a, dtype=DTYPE)
    if out.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {out.shape}")
    return out


def _check_finite(out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value produced")
    return out


def _check_same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def ew_mul(a, b) -> np.ndarray:
    a, b = as_dense(a), as_dense(b)
    _check_same_length(a, b)
    return _check_finite(a * b)


def ew_div(a, b) -> np.ndarray:
    """Coordinate-wise ``a / b``; every divisor coordinate must be positive."""
    a, b = as_dense(a), as_dense(b)
    _check_same_length(a, b)
    if np.any(b <= 0):
        raise ValueError("nonpositive divisor coordinate")
    return _check_finite(a / b)


def ew_square(a) -> np.ndarray:
    a = as_dense(a)
    return _check_finite(a * a)


def ew_sqrt_add(a, eps: float) -> np.ndarray:
    """``sqrt(a) + eps`` coordinate-wise, the adaptive denominator."""
    a = as_dense(a)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if np.any(a < 0):
        raise ValueError("negative input to sqrt")
    return _check_finite(np.sqrt(a) + eps)


def l2_norm(a) -> float:
    if isinstance(a, SparseVec):
        a = a.values
    return float(np.sqrt(np.dot(a, a)))


def l1_norm(a) -> float:
    if isinstance(a, SparseVec):
        a = a.values
    return float(np.sum(np.abs(a)))


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y``. ``x`` may be sparse, ``y`` is dense."""
    y = as_dense(y)
    if isinstance(x, SparseVec):
        if x.dim != y.shape[0]:
            raise ValueError(f"dimension mismatch: {x.dim} vs {y.shape[0]}")
        out = y.copy()
        out[x.indices] += alpha * x.values
        return _check_finite(out)
    x = as_dense(x)
    _check_same_length(x, y)
    return _check_finite(alpha * x + y)


@dataclass(frozen=True)
class SparseVec:
    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=DTYPE)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-d of equal length")
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise ValueError("indices must be strictly ascending")
            if idx[0] < 0 or idx[-1] >= self.dim:
                raise IndexError(f"index out of range for dim {self.dim}")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def densify(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=DTYPE)
        out[self.indices] = self.values
        return out

    @classmethod
    def from_dense(cls, a, keep_zeros: bool = False) -> "SparseVec":
        a = as_dense(a)
        idx = np.arange(a.size) if keep_zeros else np.flatnonzero(a)
        return cls(idx, a[idx], a.size)

    def scale(self, alpha: float) -> "SparseVec":
        return SparseVec(self.indices, alpha * self.values, self.dim)

    def __add__(self, other: "SparseVec") -> "SparseVec":
        if self.dim != other.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        idx = np.union1d(self.indices, other.indices)
        val = np.zeros(idx.size, dtype=DTYPE)
        val[np.searchsorted(idx, self.indices)] += self.values
        val[np.searchsorted(idx, other.indices)] += other.values
        return SparseVec(idx, val, self.dim)


def sparsify(a) -> SparseVec:
    return SparseVec.from_dense(a)
