"""
Tests the NF4 codec, staged frozen-weight products and the QNF4 container
"""

import os
import sys
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

import numkit
from errors import ConfigError, ContainerError, DataError
from oftlayer import BlockOrthogonalAdapter, forward_input_centric
from quantkit import (
    NF4,
    NF4_OFFSET,
    FullPrecisionWeight,
    apply_weight,
    base_product,
    build_codebook,
    dequantize,
    load_quantized,
    pack_nibbles,
    qoft_backward,
    qoft_forward,
    quantize,
    quantized_from_bytes,
    quantized_to_bytes,
    roundtrip_rms,
    save_quantized,
    unpack_nibbles,
)


def test_codebook_layout():
    """Test 16 increasing levels, exact endpoints and zero, eight below and seven above"""
    print("\n1. Testing NF4 codebook...")

    levels = NF4.levels
    assert levels.shape == (16,)
    assert levels[0] == -1.0 and levels[-1] == 1.0
    assert np.all(np.diff(levels) > 0)
    assert NF4.zero_index == 8
    assert (np.count_nonzero(levels < 0), np.count_nonzero(levels > 0)) == (8, 7)
    assert abs(levels[7] + 0.0796) < 1e-3
    assert abs(levels[1] + 0.7230) < 1e-3
    assert abs(levels[9] - 0.0911) < 1e-3
    assert abs(levels[14] - 0.6962) < 1e-3
    assert np.array_equal(build_codebook().levels, levels)
    print(f"  levels {np.round(levels, 4)}")


def test_codebook_quantiles_by_integration():
    """Test each level sits where the integrated normal density reaches its target mass"""
    print("\n2. Testing level quantiles by numerical integration...")

    scale = norm.ppf(NF4_OFFSET)
    negative_targets = np.linspace(NF4_OFFSET, 0.5, 9)[:-1]
    for level, target in zip(-NF4.levels[:8], negative_targets):
        upper, _ = quad(norm.pdf, 0.0, level * scale)
        assert abs(0.5 + upper - target) < 1e-9

    positive_targets = np.linspace(NF4_OFFSET, 0.5, 8)[:-1]
    for level, target in zip(NF4.levels[::-1][:7], positive_targets):
        upper, _ = quad(norm.pdf, 0.0, level * scale)
        assert abs(0.5 + upper - target) < 1e-9


def test_encode_ties_and_levels():
    """Test every level encodes to itself and midpoints resolve to the lower index"""
    print("\n3. Testing nearest-level encoding...")

    assert np.array_equal(NF4.encode(NF4.levels), np.arange(16))
    assert np.array_equal(NF4.encode(NF4.midpoints), np.arange(15))
    assert NF4.encode(np.array([-5.0]))[0] == 0
    assert NF4.encode(np.array([5.0]))[0] == 15


def test_nibble_packing():
    """Test the first code of each pair lands in the low nibble"""
    print("\n4. Testing nibble packing...")

    packed = pack_nibbles(np.array([1, 2, 15]))
    assert list(packed) == [0x21, 0x0F]
    assert list(unpack_nibbles(packed, 3)) == [1, 2, 15]


def test_levels_round_trip_exactly():
    """Test values on the level grid with a shared absmax survive quantization exactly"""
    print("\n5. Testing level exactness...")

    w = (2.0 * np.tile(NF4.levels, 8)).reshape(8, 16)
    q = quantize(w)
    assert np.array_equal(dequantize(q), w)
    assert np.array_equal(dequantize(quantize(dequantize(q))), w)

    general = float(np.float32(1.3))
    w = (general * np.tile(NF4.levels, 8)).reshape(8, 16)
    assert np.array_equal(dequantize(quantize(w)), w)

    # absmax is kept as a float32 offset, so other scales are exact to float32 precision
    w = (1.3 * np.tile(NF4.levels, 8)).reshape(8, 16)
    restored = dequantize(quantize(w))
    assert not np.array_equal(restored, w)
    assert np.allclose(restored, w, rtol=1e-7, atol=0.0)


def test_roundtrip_rms_gaussian():
    """Test the reconstruction error of Gaussian weights stays a small fraction of sigma"""
    print("\n6. Testing round-trip RMS...")

    rng = numkit.make_rng(0)
    sigma = 0.02
    w = rng.standard_normal((256, 256)) * sigma
    rms = roundtrip_rms(w)
    assert rms <= 0.12 * sigma
    assert roundtrip_rms(np.zeros((0, 4))) == 0.0
    print(f"  RMS / sigma = {rms / sigma:.4f}")


def test_partial_blocks_and_zero_blocks():
    """Test shapes that do not fill the last block and all-zero blocks"""
    print("\n7. Testing ragged and zero blocks...")

    rng = numkit.make_rng(1)
    w = rng.standard_normal((7, 11))
    q = quantize(w, blocksize=16, group_size=3)
    assert q.n_blocks == 5
    assert dequantize(q).shape == (7, 11)
    assert np.abs(dequantize(q) - w).max() <= np.abs(w).max() * 0.2

    z = quantize(np.zeros((4, 4)))
    assert np.array_equal(dequantize(z), np.zeros((4, 4)))


def test_quantize_errors():
    """Test bad block sizes and non-finite input are refused"""
    print("\n8. Testing quantize validation...")

    with pytest.raises(ConfigError):
        quantize(np.ones((2, 2)), blocksize=0)
    with pytest.raises(DataError):
        quantize(np.array([[1.0, np.inf]]))


def test_staging_policies_agree():
    """Test full and streamed staging give the same products, streamed with less memory"""
    print("\n9. Testing staging policies...")

    rng = numkit.make_rng(2)
    q = quantize(rng.standard_normal((128, 96)))
    x = rng.standard_normal((128, 4))
    g = rng.standard_normal((96, 4))
    dense = dequantize(q)

    with numkit.AllocMeter() as full:
        z_full = base_product(q, x, staging="full")
    with numkit.AllocMeter() as streamed:
        z_streamed = base_product(q, x, staging="streamed")
    assert np.allclose(z_full, dense.T @ x, atol=1e-12)
    assert np.allclose(z_streamed, z_full, atol=1e-12)
    assert full.peak_bytes - streamed.peak_bytes >= 0.9 * 128 * 96 * 8
    print(f"  full peak {full.peak_bytes}, streamed peak {streamed.peak_bytes}")

    assert np.allclose(apply_weight(q, g, staging="streamed"), dense @ g, atol=1e-12)
    assert np.allclose(apply_weight(q, g, staging="full"), dense @ g, atol=1e-12)
    with pytest.raises(ConfigError):
        base_product(q, x, staging="lazy")


def test_qoft_forward_composition():
    """Test qoft equals the input-centric forward on the dequantized weight"""
    print("\n10. Testing qoft forward...")

    rng = numkit.make_rng(3)
    w = rng.standard_normal((32, 16))
    x = rng.standard_normal((32, 5))
    a = BlockOrthogonalAdapter.random(32, 8, rng, scale=0.1)
    q = quantize(w)
    expected = forward_input_centric(a, dequantize(q), x)
    for staging in ("full", "streamed"):
        assert np.allclose(qoft_forward(q, a, x, staging=staging), expected, atol=1e-12)

    passthrough = qoft_forward(FullPrecisionWeight(w), a, x)
    assert np.array_equal(passthrough, forward_input_centric(a, w, x))


def test_qoft_backward_leaves_base_frozen():
    """Test only the adapter receives gradients and the codes are untouched"""
    print("\n11. Testing qoft backward...")

    rng = numkit.make_rng(4)
    w = rng.standard_normal((16, 8))
    q = quantize(w)
    codes = q.codes.copy()
    absmax = q.absmax_q.copy()
    a = BlockOrthogonalAdapter.random(16, 4, rng, scale=0.1)
    x = rng.standard_normal((16, 3))
    g_z = rng.standard_normal((8, 3))

    grads, g_x = qoft_backward(q, a, x, g_z)
    assert len(grads) == a.block_count
    assert all(g.shape == (6,) for g in grads)
    assert g_x.shape == x.shape
    assert np.array_equal(q.codes, codes)
    assert np.array_equal(q.absmax_q, absmax)


def test_container_round_trip(tmp_path):
    """Test the QNF4 container preserves codes and scales bit for bit"""
    print("\n12. Testing QNF4 container...")

    rng = numkit.make_rng(5)
    q = quantize(rng.standard_normal((33, 17)), blocksize=64, group_size=4)
    path = str(tmp_path / "w.qnf4")
    save_quantized(path, q)
    restored = load_quantized(path)
    assert restored.shape == q.shape
    assert np.array_equal(restored.codes, q.codes)
    assert np.array_equal(restored.absmax_q, q.absmax_q)
    assert np.array_equal(dequantize(restored), dequantize(q))

    data = quantized_to_bytes(q)
    with pytest.raises(ContainerError):
        quantized_from_bytes(b"NOPE" + data[4:])
    with pytest.raises(ContainerError):
        quantized_from_bytes(data[:-1])
    with pytest.raises(ContainerError):
        quantized_from_bytes(data[:4] + bytes([2]) + data[5:])


def run_all_tests():
    import tempfile
    from pathlib import Path

    print("=" * 60)
    print("QUANTKIT TESTS")
    print("=" * 60)
    test_codebook_layout()
    test_codebook_quantiles_by_integration()
    test_encode_ties_and_levels()
    test_nibble_packing()
    test_levels_round_trip_exactly()
    test_roundtrip_rms_gaussian()
    test_partial_blocks_and_zero_blocks()
    test_quantize_errors()
    test_staging_policies_agree()
    test_qoft_forward_composition()
    test_qoft_backward_leaves_base_frozen()
    with tempfile.TemporaryDirectory() as tmp:
        test_container_round_trip(Path(tmp))
    print("\n" + "=" * 60)
    print("All quantkit tests passed")


if __name__ == "__main__":
    run_all_tests()
