"""
Compact skew-symmetric storage

A skew-symmetric n x n block is fully described by its strict upper triangle,
stored row by row: entry (i, j), i < j, lives at index
    i*n - i*(i+1)/2 + (j - i - 1)
which is exactly the order numpy.triu_indices(n, 1) walks.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence, Tuple

import numpy as np

import numkit
from errors import ShapeError, SymmetryViolationError, check_shape

SKEW_TOL = 1e-12


@lru_cache(maxsize=64)
def _upper(n: int) -> Tuple[np.ndarray, np.ndarray]:
    rows, cols = np.triu_indices(n, 1)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def compact_length(n: int) -> int:
    return n * (n - 1) // 2


def compact_index(i: int, j: int, n: int) -> int:
    """Position of Q[i, j] (i < j) inside the compact vector"""
    if not 0 <= i < j < n:
        raise IndexError(f"({i}, {j}) is not in the strict upper triangle of a {n}x{n} block")
    return i * n - i * (i + 1) // 2 + (j - i - 1)


@dataclass(frozen=True, eq=False)
class CompactSkew:
    """Strict upper triangle of a skew-symmetric n x n matrix"""
    n: int
    u: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise ShapeError(f"block side must be >= 1, got {self.n}")
        if self.u.ndim != 1 or self.u.shape[0] != compact_length(self.n):
            raise ShapeError(
                f"compact vector for n={self.n} needs {compact_length(self.n)} values, got {self.u.shape}"
            )

    @classmethod
    def zeros(cls, n: int) -> "CompactSkew":
        return cls(n, np.zeros(compact_length(n), dtype=np.float64))

    @property
    def size(self) -> int:
        return self.u.shape[0]


def pack(q: np.ndarray) -> CompactSkew:
    """
    Keep the strict upper triangle of a skew-symmetric matrix

    Raises:
        SymmetryViolationError: max |q + q^T| exceeds SKEW_TOL; the error's
            worst attribute names the offending entry
    """
    check_shape(q.ndim == 2 and q.shape[0] == q.shape[1], f"pack needs a square matrix, got {q.shape}")
    n = q.shape[0]
    sym = np.abs(q + q.T)
    if n and sym.max() > SKEW_TOL:
        i, j = np.unravel_index(int(np.argmax(sym)), sym.shape)
        worst = (int(i), int(j), float(sym[i, j]))
        raise SymmetryViolationError(
            f"matrix is not skew-symmetric: |q[{i},{j}] + q[{j},{i}]| = {worst[2]:.3e}", worst
        )
    rows, cols = _upper(n)
    return CompactSkew(n, np.array(q[rows, cols], dtype=np.float64))


def unpack(s: CompactSkew) -> np.ndarray:
    """Rebuild Q with Q[i,j] = u, Q[j,i] = -u, zero diagonal"""
    q = np.zeros((s.n, s.n), dtype=s.u.dtype)
    rows, cols = _upper(s.n)
    q[rows, cols] = s.u
    q[cols, rows] = -s.u
    return q


def skew_from_upper(u: np.ndarray, n: int) -> np.ndarray:
    """Shortcut for unpack(CompactSkew(n, u))"""
    return unpack(CompactSkew(n, np.asarray(u, dtype=np.float64)))


def project_to_compact(m: np.ndarray) -> np.ndarray:
    """
    Chain rule through the skew parameterization

    Given M = dL/dQ for an unconstrained Q, returns dL/du with
    dL/du_ij = M_ij - M_ji.
    """
    rows, cols = _upper(m.shape[0])
    return m[rows, cols] - m[cols, rows]


def blockwise_apply(mats: Sequence[np.ndarray], x: np.ndarray, transpose: bool = False) -> np.ndarray:
    """
    Apply Diag(mats) (or its transpose) to x one row-slice at a time

    The d x d block-diagonal matrix is never formed; the only new buffer is
    the d x m output.
    """
    total = sum(mat.shape[0] for mat in mats)
    check_shape(total == x.shape[0], f"blocks cover {total} rows but x has {x.shape[0]}")
    out = numkit.zeros(x.shape[0], x.shape[1], dtype=x.dtype)
    offset = 0
    for mat in mats:
        side = mat.shape[0]
        block = mat.T if transpose else mat
        numkit.matmul(block, x[offset:offset + side], out=out[offset:offset + side])
        offset += side
    return out


def apply_blocks(blocks: List[CompactSkew], x: np.ndarray) -> np.ndarray:
    """Diag(Q_1, ..., Q_r) @ x, reconstructing one block at a time"""
    total = sum(s.n for s in blocks)
    check_shape(total == x.shape[0], f"blocks cover {total} rows but x has {x.shape[0]}")
    out = numkit.zeros(x.shape[0], x.shape[1], dtype=x.dtype)
    offset = 0
    for s in blocks:
        q = numkit.record_alloc(unpack(s).astype(x.dtype, copy=False))
        numkit.matmul(q, x[offset:offset + s.n], out=out[offset:offset + s.n])
        numkit.record_free(q)
        offset += s.n
    return out


def random_skew(rng: np.random.Generator, n: int, scale: float = 1.0) -> CompactSkew:
    """Compact skew block with N(0, scale^2) upper entries"""
    return CompactSkew(n, rng.standard_normal(compact_length(n)) * scale)
