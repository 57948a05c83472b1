"""
Orthogonal parameterization of skew-symmetric generators

cayley_exact is the solve-based oracle R = (I + Q)(I - Q)^{-1}.
cayley_neumann replaces the inverse with the truncated series
I + Q + ... + Q^k and never solves anything.
"""

import logging
from typing import List, Optional, Tuple

import numpy as np

import numkit
from data_models import NeumannConfig
from errors import DivergenceRiskError, SymmetryViolationError, check_shape
from skewcore import SKEW_TOL

logger = logging.getLogger(__name__)

DEFAULT_NEUMANN = NeumannConfig()


def _require_skew(q: np.ndarray) -> None:
    check_shape(q.ndim == 2 and q.shape[0] == q.shape[1], f"expected a square matrix, got {q.shape}")
    if q.size:
        worst = float(np.abs(q + q.T).max())
        if worst > SKEW_TOL * max(1.0, float(np.abs(q).max())):
            raise SymmetryViolationError(f"generator is not skew-symmetric (max |q + q^T| = {worst:.3e})")


def cayley_exact(q: np.ndarray) -> np.ndarray:
    """
    Exact Cayley transform

    I + Q and (I - Q)^{-1} commute, so R is computed as solve(I - Q, I + Q).
    For real skew-symmetric Q the system is always nonsingular; a
    SingularMatrixError here means the input was not what it claimed.
    """
    _require_skew(q)
    eye = np.eye(q.shape[0], dtype=q.dtype)
    return numkit.solve(eye - q, eye + q)


def neumann_factors(q: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Return (P, R) with P = I + Q + ... + Q^k and R = (I + Q) P

    P is accumulated Horner-style, P = I + Q(I + Q(... (I + Q))), which costs
    k - 1 products; R = P + Q P adds one more, k in total.
    """
    eye = np.eye(q.shape[0], dtype=q.dtype)
    p = numkit.record_alloc(eye + q)
    for _ in range(k - 1):
        nxt = numkit.matmul(q, p)
        nxt += eye
        numkit.record_free(p)
        p = nxt
    r = numkit.matmul(q, p)
    r += p
    return p, r


def neumann_power_factors(q: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray, List[np.ndarray]]:
    """
    (P, R, [I, Q, ..., Q^{k-1}]) for a construction the backward will reuse

    Same P and R as neumann_factors and the same k products: the powers
    cost k - 2, Q^k one more, and R = P + Q P the last.
    """
    powers = matrix_powers(q, k - 1)
    p = numkit.record_alloc(np.sum(powers, axis=0))
    if k == 1:
        p += q
    else:
        top = numkit.matmul(q, powers[-1])
        p += top
        numkit.record_free(top)
    r = numkit.matmul(q, p)
    r += p
    return p, r, powers


def cayley_neumann(q: np.ndarray, cfg: Optional[NeumannConfig] = None) -> np.ndarray:
    """
    Cayley-Neumann approximation of the Cayley transform

    Raises:
        DivergenceRiskError: cfg.norm_guard is set and the spectral norm
            estimate of q exceeds it
    """
    cfg = cfg or DEFAULT_NEUMANN
    _require_skew(q)
    if cfg.norm_guard is not None:
        estimate = numkit.spectral_norm_est(q, iters=100)
        if estimate > cfg.norm_guard:
            raise DivergenceRiskError(
                f"||Q||_2 ~ {estimate:.4f} exceeds the Neumann guard {cfg.norm_guard}", estimate
            )
    p, r = neumann_factors(q, cfg.k)
    numkit.record_free(p)
    return r


def orthogonality_error(r: np.ndarray) -> float:
    """||R^T R - I||_F"""
    check_shape(r.ndim == 2 and r.shape[0] == r.shape[1], f"expected a square matrix, got {r.shape}")
    gram = r.T @ r
    gram[np.diag_indices_from(gram)] -= 1.0
    return float(np.linalg.norm(gram, "fro"))


def tail_bound(q_norm: float, k: int) -> float:
    """
    Spectral-norm bound on ||R_k - R_exact|| for ||Q||_2 = q_norm < 1

    R_exact - R_k = (I + Q) Q^{k+1} (I - Q)^{-1}, which is bounded by
    2 q^{k+1} / (1 - q).
    """
    if not 0.0 <= q_norm < 1.0:
        return float("inf")
    return 2.0 * q_norm ** (k + 1) / (1.0 - q_norm)


def matrix_powers(q: np.ndarray, upto: int) -> List[np.ndarray]:
    """[I, Q, Q^2, ..., Q^upto]"""
    powers = [np.eye(q.shape[0], dtype=q.dtype)]
    if upto >= 1:
        powers.append(q)
    for _ in range(2, upto + 1):
        powers.append(numkit.matmul(q, powers[-1]))
    return powers


def rotation_determinant(r: np.ndarray) -> float:
    """Sign check helper: Cayley outputs are rotations (det = +1)"""
    return float(np.linalg.det(r))


if __name__ == "__main__":
    print("Testing cayley...")
    print("=" * 50)

    rng = numkit.make_rng(0)
    a = rng.standard_normal((8, 8))
    q = a - a.T
    q *= 0.5 / numkit.spectral_norm_est(q)
    exact = cayley_exact(q)
    print(f"exact: orthogonality error {orthogonality_error(exact):.2e}, det {rotation_determinant(exact):+.6f}")
    for k in (1, 3, 5, 8):
        approx = cayley_neumann(q, NeumannConfig(k=k))
        gap = np.linalg.norm(approx - exact, 2)
        print(f"k={k}: ||R_k - R||_2 = {gap:.2e} (bound {tail_bound(0.5, k):.2e})")

    print("\n" + "=" * 50)
    print("cayley: READY")
