"""
Tests compact skew-symmetric storage and the blockwise products
"""

import os
import sys
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

import numpy as np
import pytest

import numkit
from errors import ShapeError, SymmetryViolationError
from skewcore import (
    CompactSkew,
    apply_blocks,
    blockwise_apply,
    compact_index,
    compact_length,
    pack,
    project_to_compact,
    random_skew,
    skew_from_upper,
    unpack,
)


def test_layout():
    """Test the compact vector walks the strict upper triangle row by row"""
    print("\n1. Testing compact layout...")

    n = 5
    q = np.zeros((n, n))
    expected = []
    for i in range(n):
        for j in range(i + 1, n):
            q[i, j] = 10 * i + j
            q[j, i] = -q[i, j]
            expected.append(10 * i + j)

    s = pack(q)
    assert list(s.u) == expected
    for i in range(n):
        for j in range(i + 1, n):
            assert s.u[compact_index(i, j, n)] == 10 * i + j

    with pytest.raises(IndexError):
        compact_index(2, 2, n)
    assert compact_length(1) == 0
    assert compact_length(32) == 496


def test_round_trip():
    """Test pack(unpack(s)) and unpack(pack(q)) are bit-exact"""
    print("\n2. Testing round trips...")

    rng = numkit.make_rng(0)
    for n in (1, 2, 3, 7, 16):
        s = random_skew(rng, n, scale=0.3)
        q = unpack(s)
        assert np.array_equal(pack(q).u, s.u)
        assert np.array_equal(unpack(pack(q)), q)
        assert np.array_equal(q, -q.T)
        assert np.all(np.diag(q) == 0.0)
    print("  bit-exact for n in 1, 2, 3, 7, 16")


def test_pack_rejects_non_skew():
    """Test pack names the worst offending entry"""
    print("\n3. Testing symmetry violation...")

    q = unpack(CompactSkew(3, np.array([1.0, 2.0, 3.0])))
    q[2, 0] += 0.5
    with pytest.raises(SymmetryViolationError) as info:
        pack(q)
    i, j, size = info.value.worst
    assert {i, j} == {0, 2}
    assert abs(size - 0.5) < 1e-15

    with pytest.raises(ShapeError):
        pack(np.zeros((2, 3)))


def test_compact_length_check():
    """Test a compact vector of the wrong length is refused"""
    print("\n4. Testing CompactSkew validation...")

    with pytest.raises(ShapeError):
        CompactSkew(4, np.zeros(5))
    with pytest.raises(ShapeError):
        CompactSkew(0, np.zeros(0))
    assert np.array_equal(skew_from_upper([2.0], 2), [[0.0, 2.0], [-2.0, 0.0]])


def test_project_to_compact():
    """Test dL/du_ij = M_ij - M_ji, the chain rule through unpack"""
    print("\n5. Testing projection to compact gradients...")

    rng = numkit.make_rng(1)
    m = rng.standard_normal((4, 4))
    g = project_to_compact(m)
    rows, cols = np.triu_indices(4, 1)
    assert np.array_equal(g, m[rows, cols] - m[cols, rows])

    # <M, unpack(s)> is linear in u with gradient g
    u = rng.standard_normal(6)
    value = np.sum(m * unpack(CompactSkew(4, u)))
    assert abs(value - float(g @ u)) < 1e-12


def test_apply_blocks_matches_dense():
    """Test block-by-block products against the dense block-diagonal matrix"""
    print("\n6. Testing apply_blocks and blockwise_apply...")

    rng = numkit.make_rng(2)
    sides = [3, 1, 4]
    blocks = [random_skew(rng, n) for n in sides]
    dense = np.zeros((8, 8))
    offset = 0
    for s in blocks:
        dense[offset:offset + s.n, offset:offset + s.n] = unpack(s)
        offset += s.n
    x = rng.standard_normal((8, 5))
    assert np.allclose(apply_blocks(blocks, x), dense @ x, atol=1e-13)

    mats = [unpack(s) + np.eye(s.n) for s in blocks]
    dense_r = dense + np.eye(8)
    assert np.allclose(blockwise_apply(mats, x), dense_r @ x, atol=1e-13)
    assert np.allclose(blockwise_apply(mats, x, transpose=True), dense_r.T @ x, atol=1e-13)

    with pytest.raises(ShapeError):
        apply_blocks(blocks, rng.standard_normal((7, 2)))


def test_blockwise_apply_memory():
    """Test the only metered buffer is the d x m output"""
    print("\n7. Testing blockwise memory...")

    rng = numkit.make_rng(3)
    mats = [np.eye(4) for _ in range(8)]
    x = rng.standard_normal((32, 6))
    with numkit.AllocMeter() as meter:
        blockwise_apply(mats, x)
    assert meter.peak_bytes == 32 * 6 * 8
    assert meter.flops == 8 * 2 * 4 * 4 * 6


def run_all_tests():
    print("=" * 60)
    print("SKEWCORE TESTS")
    print("=" * 60)
    test_layout()
    test_round_trip()
    test_pack_rejects_non_skew()
    test_compact_length_check()
    test_project_to_compact()
    test_apply_blocks_matches_dense()
    test_blockwise_apply_memory()
    print("\n" + "=" * 60)
    print("All skewcore tests passed")


if __name__ == "__main__":
    run_all_tests()
