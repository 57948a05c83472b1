"""
Low-rank (LoRA / QLoRA) comparison adapter and merge analysis

z = W^T x + scaling * B^T (A^T x); the d x n update AB is only ever formed
when merging or reporting.
"""

import logging
from typing import Optional, Tuple

import numpy as np

import numkit
from errors import ConfigError, check_shape
from data_models import MergeGapReport
from oftlayer import BlockOrthogonalAdapter, adapter_orthogonality_error, column_norm_drift, merge
from quantkit import DEFAULT_BLOCKSIZE, FrozenWeight, apply_weight, base_product, roundtrip_rms

logger = logging.getLogger(__name__)


class LowRankAdapter:
    """
    LoRA pair A (d x rank), B (rank x n) with scaling alpha / rank

    A fresh adapter has B = 0, so it is an exact no-op like a fresh
    orthogonal adapter.
    """

    def __init__(self, a: np.ndarray, b: np.ndarray, scaling: float = 1.0):
        check_shape(a.ndim == 2 and b.ndim == 2, "LoRA factors must be matrices")
        check_shape(a.shape[1] == b.shape[0], f"rank mismatch: A is {a.shape}, B is {b.shape}")
        if a.shape[1] < 1:
            raise ConfigError("LoRA rank must be >= 1")
        self.a = a
        self.b = b
        self.scaling = float(scaling)

    @classmethod
    def fresh(cls, d: int, n: int, rank: int, rng: np.random.Generator,
              alpha: Optional[float] = None) -> "LowRankAdapter":
        """A ~ N(0, 1/d), B = 0"""
        if rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
        alpha = rank if alpha is None else alpha
        a = numkit.gaussian(rng, d, rank, scale=1.0 / np.sqrt(d))
        return cls(a, np.zeros((rank, n)), alpha / rank)

    @classmethod
    def from_delta(cls, delta: np.ndarray, rank: int, scaling: float = 1.0) -> "LowRankAdapter":
        """Best rank-`rank` approximation of an additive update (truncated SVD)"""
        u, s, vt = np.linalg.svd(delta, full_matrices=False)
        rank = min(rank, s.shape[0])
        a = u[:, :rank] * s[:rank]
        b = vt[:rank] / scaling
        return cls(np.ascontiguousarray(a), np.ascontiguousarray(b), scaling)

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def n(self) -> int:
        return self.b.shape[1]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def num_params(self) -> int:
        return self.a.size + self.b.size

    def parameters(self):
        return [self.a, self.b]

    def delta(self) -> np.ndarray:
        """scaling * A B, dense d x n"""
        return self.scaling * (self.a @ self.b)

    def summary(self) -> str:
        return f"LowRankAdapter d={self.d} n={self.n} rank={self.rank} scaling={self.scaling:g}"


def _check_lora(w: FrozenWeight, l: LowRankAdapter, x: np.ndarray) -> None:
    check_shape(tuple(w.shape) == (l.d, l.n), f"adapter is {l.d}x{l.n} but weight is {tuple(w.shape)}")
    check_shape(x.ndim == 2 and x.shape[0] == l.d, f"x must be {l.d} x m, got {x.shape}")


def lora_forward(w: FrozenWeight, l: LowRankAdapter, x: np.ndarray, staging: str = "streamed") -> np.ndarray:
    """W^T x + scaling * B^T (A^T x); w may be dense, quantized or pass-through"""
    _check_lora(w, l, x)
    z = base_product(w, x, staging=staging)
    t = numkit.matmul(l.a.T, x)
    update = numkit.matmul(l.b.T, t)
    z += l.scaling * update
    numkit.record_free(t, update)
    return z


def lora_backward(w: FrozenWeight, l: LowRankAdapter, x: np.ndarray, g_z: np.ndarray,
                  staging: str = "streamed") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradients of a scalar loss through lora_forward, summed over the batch

    Returns:
        (dL/dA, dL/dB, dL/dx)
    """
    _check_lora(w, l, x)
    check_shape(g_z.shape == (l.n, x.shape[1]), f"g_z must be {(l.n, x.shape[1])}, got {g_z.shape}")

    t = l.a.T @ x
    g_t = l.scaling * (l.b @ g_z)
    g_b = l.scaling * (t @ g_z.T)
    g_a = x @ g_t.T
    g_x = apply_weight(w, g_z, staging=staging)
    g_x += l.a @ g_t
    return g_a, g_b, g_x


def merge_lora(w: np.ndarray, l: LowRankAdapter) -> np.ndarray:
    """W + scaling * A B"""
    check_shape(w.shape == (l.d, l.n), f"adapter is {l.d}x{l.n} but weight is {w.shape}")
    return w + l.delta()


def merge_gap_report(w: np.ndarray, oft: BlockOrthogonalAdapter, lora: LowRankAdapter,
                     blocksize: int = DEFAULT_BLOCKSIZE) -> MergeGapReport:
    """
    Compare what merging each adapter does to the frozen weight

    Deviation and drift fields are measured on the full-precision merge; the
    requantization fields quantize each merged weight with the NF4 codec and
    report the RMS of the round trip.
    """
    w = numkit.as_matrix(w)
    lora_delta = lora.delta()
    merged_lora = w + lora_delta
    merged_oft = merge(oft, w)

    report = MergeGapReport(
        lora_max_dev=float(np.abs(lora_delta).max()) if lora_delta.size else 0.0,
        oft_col_norm_drift=float(column_norm_drift(merged_oft, w).max()) if w.size else 0.0,
        oft_max_dev=float(np.abs(merged_oft - w).max()) if w.size else 0.0,
        oft_orth_error=adapter_orthogonality_error(oft),
        base_requant_rms=roundtrip_rms(w, blocksize),
        lora_requant_rms=roundtrip_rms(merged_lora, blocksize),
        oft_requant_rms=roundtrip_rms(merged_oft, blocksize),
        max_col_norm=float(np.linalg.norm(w, axis=0).max()) if w.size else 0.0,
    )
    logger.debug("merge gap: %s", report.to_dict())
    return report


if __name__ == "__main__":
    print("Testing baseline...")
    print("=" * 50)

    rng = numkit.make_rng(0)
    w = numkit.gaussian(rng, 64, 32)
    oft = BlockOrthogonalAdapter.random(64, 8, rng, scale=0.05)
    lora = LowRankAdapter.fresh(64, 32, 4, rng)
    lora.b[:] = numkit.gaussian(rng, 4, 32, scale=0.05)
    print(lora.summary())
    print(merge_gap_report(w, oft, lora).to_text())

    print("=" * 50)
    print("baseline: READY")
