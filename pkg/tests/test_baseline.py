"""
Tests the low-rank comparison adapter and the merge-gap report
"""

import os
import sys
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

import numpy as np
import pytest

import numkit
from baseline import LowRankAdapter, lora_backward, lora_forward, merge_gap_report, merge_lora
from errors import ConfigError, ShapeError
from oftlayer import BlockOrthogonalAdapter
from quantkit import dequantize, quantize


def test_fresh_adapter_is_noop():
    """Test B = 0 at initialization makes the forward equal W^T x"""
    print("\n1. Testing fresh LoRA adapter...")

    rng = numkit.make_rng(0)
    w = rng.standard_normal((10, 6))
    x = rng.standard_normal((10, 3))
    lora = LowRankAdapter.fresh(10, 6, 2, rng, alpha=4.0)
    assert lora.scaling == 2.0
    assert lora.num_params == 2 * (10 + 6)
    assert np.array_equal(lora_forward(w, lora, x), w.T @ x)
    assert np.array_equal(merge_lora(w, lora), w)
    print(f"  {lora.summary()}")


def test_forward_matches_merged_weight():
    """Test the factored forward equals the merged dense product"""
    print("\n2. Testing merged oracle...")

    rng = numkit.make_rng(1)
    w = rng.standard_normal((12, 7))
    x = rng.standard_normal((12, 4))
    lora = LowRankAdapter(rng.standard_normal((12, 3)), rng.standard_normal((3, 7)), scaling=0.5)
    assert np.allclose(lora_forward(w, lora, x), merge_lora(w, lora).T @ x, atol=1e-12)

    q = quantize(w)
    assert np.allclose(lora_forward(q, lora, x), lora_forward(dequantize(q), lora, x), atol=1e-12)


def test_from_delta_full_rank():
    """Test a full-rank factorization reproduces an arbitrary additive update"""
    print("\n3. Testing truncated-SVD factorization...")

    rng = numkit.make_rng(2)
    delta = rng.standard_normal((8, 5))
    lora = LowRankAdapter.from_delta(delta, rank=5, scaling=2.0)
    assert np.allclose(lora.delta(), delta, atol=1e-12)

    low = LowRankAdapter.from_delta(delta, rank=2)
    assert low.rank == 2
    assert np.linalg.matrix_rank(low.delta()) == 2


def test_backward_finite_difference():
    """Test dL/dA, dL/dB and dL/dx against central differences"""
    print("\n4. Testing LoRA backward...")

    rng = numkit.make_rng(3)
    w = rng.standard_normal((6, 4))
    x = rng.standard_normal((6, 2))
    lora = LowRankAdapter(rng.standard_normal((6, 2)), rng.standard_normal((2, 4)), scaling=0.5)

    def loss():
        z = lora_forward(w, lora, x)
        return 0.5 * float(np.sum(z * z))

    z = lora_forward(w, lora, x)
    g_a, g_b, g_x = lora_backward(w, lora, x, z)
    h = 1e-6
    for param, grad in ((lora.a, g_a), (lora.b, g_b), (x, g_x)):
        flat = param.reshape(-1)
        for i in range(flat.shape[0]):
            saved = flat[i]
            flat[i] = saved + h
            plus = loss()
            flat[i] = saved - h
            minus = loss()
            flat[i] = saved
            assert abs(grad.reshape(-1)[i] - (plus - minus) / (2 * h)) < 1e-6 * max(1.0, abs(grad.reshape(-1)[i]))


def test_init_gradients():
    """Test only B receives gradient while B = 0"""
    print("\n5. Testing gradients at initialization...")

    rng = numkit.make_rng(4)
    w = rng.standard_normal((8, 5))
    x = rng.standard_normal((8, 3))
    lora = LowRankAdapter.fresh(8, 5, 2, rng)
    g_a, g_b, _ = lora_backward(w, lora, x, rng.standard_normal((5, 3)))
    assert not np.any(g_a)
    assert np.any(g_b)


def test_validation():
    """Test rank and shape checks"""
    print("\n6. Testing validation...")

    rng = numkit.make_rng(5)
    with pytest.raises(ConfigError):
        LowRankAdapter.fresh(4, 4, 0, rng)
    with pytest.raises(ShapeError):
        LowRankAdapter(np.ones((4, 2)), np.ones((3, 4)))
    lora = LowRankAdapter.fresh(4, 3, 1, rng)
    with pytest.raises(ShapeError):
        lora_forward(np.ones((4, 5)), lora, np.ones((4, 1)))


def test_merge_gap_report():
    """Test the report on fresh and trained-looking adapters"""
    print("\n7. Testing merge-gap report...")

    rng = numkit.make_rng(6)
    w = rng.standard_normal((16, 8))
    fresh = merge_gap_report(w, BlockOrthogonalAdapter(16, 4), LowRankAdapter.fresh(16, 8, 2, rng))
    assert fresh.lora_max_dev == 0.0
    assert fresh.oft_max_dev == 0.0
    assert fresh.oft_col_norm_drift == 0.0
    assert fresh.oft_requant_rms == fresh.base_requant_rms

    oft = BlockOrthogonalAdapter.random(16, 4, rng, scale=0.1)
    lora = LowRankAdapter(rng.standard_normal((16, 2)), rng.standard_normal((2, 8)), scaling=0.1)
    report = merge_gap_report(w, oft, lora)
    assert report.oft_col_norm_drift <= report.drift_bound() + 1e-12
    assert report.lora_max_dev == pytest.approx(float(np.abs(lora.delta()).max()))

    text = report.to_text()
    keys = [line.split("=")[0] for line in text.strip().splitlines()]
    assert keys == list(report.to_dict())
    print(text)


def run_all_tests():
    print("=" * 60)
    print("BASELINE TESTS")
    print("=" * 60)
    test_fresh_adapter_is_noop()
    test_forward_matches_merged_weight()
    test_from_delta_full_rank()
    test_backward_finite_difference()
    test_init_gradients()
    test_validation()
    test_merge_gap_report()
    print("\n" + "=" * 60)
    print("All baseline tests passed")


if __name__ == "__main__":
    run_all_tests()
