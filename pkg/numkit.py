"""
Dense numerical substrate

Matrices are 2-D numpy arrays in row-major order (float64 unless a benchmark
asks for float32). Every product that goes through matmul() reports its flop
count, and every buffer a metered path creates is reported to the active
AllocMeter, so the bench module can compare forwards by accounting rather than
by sampling the process heap.
"""

import logging
import warnings
from contextvars import ContextVar
from typing import Any, Dict, Optional

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from errors import DataError, SingularMatrixError, check_shape

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64
BENCH_DTYPE = np.float32

Matrix = np.ndarray

_ACTIVE_METER: ContextVar[Optional["AllocMeter"]] = ContextVar("alloc_meter", default=None)


class AllocMeter:
    """
    Scoped allocation and flop accountant

    Usage:
        with AllocMeter("input_centric") as meter:
            forward_input_centric(adapter, w0, x)
        meter.peak_bytes, meter.flops

    Only buffers reported through record_alloc()/record_free() are counted.
    A meter must not be shared between threads.
    """

    def __init__(self, name: str = "scope"):
        self.name = name
        self.current_bytes = 0
        self.peak_bytes = 0
        self.flops = 0
        self._token = None

    def alloc(self, nbytes: int) -> None:
        self.current_bytes += int(nbytes)
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes

    def free(self, nbytes: int) -> None:
        self.current_bytes -= int(nbytes)
        if self.current_bytes < 0:
            # freeing something allocated before the scope opened
            logger.debug("meter %s released more than it allocated", self.name)
            self.current_bytes = 0

    def add_flops(self, count: int) -> None:
        self.flops += int(count)

    def __enter__(self) -> "AllocMeter":
        self._token = _ACTIVE_METER.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_METER.reset(self._token)
        self._token = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "current_bytes": self.current_bytes,
            "peak_bytes": self.peak_bytes,
            "flops": self.flops,
        }


def active_meter() -> Optional[AllocMeter]:
    """Return the meter of the innermost open scope, if any"""
    return _ACTIVE_METER.get()


def record_alloc(arr: np.ndarray) -> np.ndarray:
    meter = _ACTIVE_METER.get()
    if meter is not None:
        meter.alloc(arr.nbytes)
    return arr


def record_free(*arrays: Optional[np.ndarray]) -> None:
    meter = _ACTIVE_METER.get()
    if meter is None:
        return
    for arr in arrays:
        if arr is not None:
            meter.free(arr.nbytes)


def record_flops(count: int) -> None:
    meter = _ACTIVE_METER.get()
    if meter is not None:
        meter.add_flops(count)


def as_matrix(data: Any, dtype: Any = None, check_finite: bool = True) -> Matrix:
    """
    Coerce data to a C-ordered 2-D array

    Args:
        data: array-like; 1-D input becomes a single column
        dtype: target dtype (float64 if None and data is not already floating)
        check_finite: reject NaN/Inf

    Returns:
        2-D numpy array
    """
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    check_shape(arr.ndim == 2, f"expected a 2-D matrix, got {arr.ndim}-D")
    if check_finite and not np.all(np.isfinite(arr)):
        raise DataError("matrix contains non-finite entries")
    return arr


def zeros(rows: int, cols: int, dtype: Any = DEFAULT_DTYPE) -> Matrix:
    """Allocate a metered zero matrix"""
    return record_alloc(np.zeros((rows, cols), dtype=dtype))


def identity(n: int, dtype: Any = DEFAULT_DTYPE) -> Matrix:
    return np.eye(n, dtype=dtype)


def matmul(a: Matrix, b: Matrix, out: Optional[Matrix] = None) -> Matrix:
    """
    Standard product a @ b

    Records 2 * a.rows * a.cols * b.cols flops with the active meter; the
    result buffer is metered unless the caller supplies out.
    """
    check_shape(a.ndim == 2 and b.ndim == 2, "matmul expects 2-D operands")
    check_shape(
        a.shape[1] == b.shape[0],
        f"matmul shape mismatch: {a.shape} x {b.shape}",
    )
    record_flops(2 * a.shape[0] * a.shape[1] * b.shape[1])
    if out is not None:
        check_shape(out.shape == (a.shape[0], b.shape[1]), f"out has shape {out.shape}")
        return np.matmul(a, b, out=out)
    return record_alloc(np.matmul(a, b))


def solve(a: Matrix, b: Matrix) -> Matrix:
    """
    Solve a X = b by partial-pivoted LU

    Raises:
        ShapeError: a not square or b has the wrong row count
        SingularMatrixError: a pivot is below working precision
    """
    check_shape(a.ndim == 2 and a.shape[0] == a.shape[1], f"solve needs a square matrix, got {a.shape}")
    check_shape(b.ndim == 2 and b.shape[0] == a.shape[0], f"rhs rows {b.shape[0]} != {a.shape[0]}")
    n = a.shape[0]
    if n == 0:
        return b.copy()

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(a, check_finite=False)

    pivots = np.abs(np.diag(lu))
    largest = float(pivots.max())
    tol = n * np.finfo(lu.dtype).eps * max(largest, float(np.abs(a).max()))
    if largest == 0.0 or float(pivots.min()) <= tol:
        raise SingularMatrixError(
            f"matrix is singular to working precision (smallest pivot {pivots.min():.3e}, tol {tol:.3e})"
        )
    record_flops(2 * n ** 3 // 3 + 2 * n * n * b.shape[1])
    return record_alloc(lu_solve((lu, piv), b, check_finite=False))


def frobenius_norm(a: Matrix) -> float:
    return float(np.linalg.norm(a, "fro"))


def spectral_norm_est(a: Matrix, iters: int = 50, seed: int = 0) -> float:
    """
    Power-iteration estimate of the operator 2-norm

    Iterates on a^T a from a seeded Gaussian start vector. The estimate
    ||a v|| never exceeds the true norm and does not decrease with iters.
    """
    check_shape(a.ndim == 2 and a.shape[0] == a.shape[1], f"expected a square matrix, got {a.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if a.size == 0 or not np.any(a):
        return 0.0

    a64 = np.asarray(a, dtype=np.float64)
    v = make_rng(seed).standard_normal(a64.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = a64.T @ (a64 @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return float(np.linalg.norm(a64 @ v))


def make_rng(seed: int) -> np.random.Generator:
    """
    Seeded generator (PCG64 bit stream, Gaussian sampling by numpy's ziggurat)

    Identical seeds give identical sequences on every platform numpy supports.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def gaussian(rng: np.random.Generator, rows: int, cols: int, scale: float = 1.0,
             dtype: Any = DEFAULT_DTYPE) -> Matrix:
    """Draw a rows x cols matrix with N(0, scale^2) entries"""
    out = rng.standard_normal((rows, cols))
    if scale != 1.0:
        out *= scale
    return np.ascontiguousarray(out, dtype=dtype)


if __name__ == "__main__":
    print("Testing numkit...")
    print("=" * 50)

    rng = make_rng(0)
    a = gaussian(rng, 6, 6) + 6 * np.eye(6)
    x = gaussian(rng, 6, 2)
    with AllocMeter("demo") as meter:
        b = matmul(a, x)
        solved = solve(a, b)
    print(f"solve residual: {frobenius_norm(solved - x):.2e}")
    print(f"meter: {meter.to_dict()}")
    print(f"||diag(3,1)||_2 ~ {spectral_norm_est(np.diag([3.0, 1.0])):.6f}")

    print("\n" + "=" * 50)
    print("numkit: READY")
