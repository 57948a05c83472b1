"""
Tests the exact Cayley transform and its Neumann-series approximation
"""

import os
import sys
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

import numpy as np
import pytest

import numkit
from cayley import (
    cayley_exact,
    cayley_neumann,
    matrix_powers,
    neumann_factors,
    neumann_power_factors,
    orthogonality_error,
    rotation_determinant,
    tail_bound,
)
from data_models import NeumannConfig
from errors import ConfigError, DivergenceRiskError, SymmetryViolationError


def _skew(rng, n, norm):
    q = rng.standard_normal((n, n))
    q = q - q.T
    return q * (norm / np.linalg.norm(q, 2))


def test_exact_is_rotation():
    """Test the exact transform is orthogonal with determinant +1 at any norm"""
    print("\n1. Testing exact Cayley transform...")

    rng = numkit.make_rng(0)
    for norm in (0.05, 0.5, 2.0, 10.0):
        r = cayley_exact(_skew(rng, 6, norm))
        assert orthogonality_error(r) < 1e-12
        assert abs(rotation_determinant(r) - 1.0) < 1e-12
        print(f"  ||Q|| = {norm}: orth err {orthogonality_error(r):.2e}")


def test_closed_form_2x2():
    """Test the 2x2 generator against its closed-form rotation"""
    print("\n2. Testing 2x2 closed form...")

    for a in (0.1, 0.5):
        r = cayley_exact(np.array([[0.0, a], [-a, 0.0]]))
        c = (1 - a * a) / (1 + a * a)
        s = 2 * a / (1 + a * a)
        assert np.allclose(r, [[c, s], [-s, c]], atol=1e-15)


def test_neumann_odd_k_2x2():
    """Test for odd k the 2x2 approximation is the exact rotation scaled by 1 + a^(k+1)"""
    print("\n3. Testing Neumann closed form for odd k...")

    a = 0.3
    q = np.array([[0.0, a], [-a, 0.0]])
    exact = cayley_exact(q)
    for k in (1, 3, 5, 7):
        r = cayley_neumann(q, NeumannConfig(k=k))
        assert np.allclose(r, exact * (1 + a ** (k + 1)), atol=1e-15)


def test_neumann_tail_bound_and_convergence():
    """Test the truncation error stays under the tail bound and shrinks with k"""
    print("\n4. Testing convergence in k...")

    rng = numkit.make_rng(1)
    q = _skew(rng, 8, 0.4)
    exact = cayley_exact(q)
    errors = []
    for k in range(1, 11):
        err = float(np.linalg.norm(cayley_neumann(q, NeumannConfig(k=k)) - exact, 2))
        assert err <= tail_bound(0.4, k) + 1e-14
        errors.append(err)
    assert all(later <= earlier for earlier, later in zip(errors, errors[1:]))
    assert errors[-1] < 1e-3
    print(f"  k=1 err {errors[0]:.2e}, k=10 err {errors[-1]:.2e}")

    assert tail_bound(1.0, 5) == float("inf")


def test_zero_generator_is_identity():
    """Test Q = 0 maps to I exactly for every k"""
    print("\n5. Testing zero generator...")

    for k in (1, 2, 5):
        assert np.array_equal(cayley_neumann(np.zeros((4, 4)), NeumannConfig(k=k)), np.eye(4))


def test_neumann_cost():
    """Test the construction takes exactly k block products"""
    print("\n6. Testing construction flops...")

    rng = numkit.make_rng(2)
    q = _skew(rng, 8, 0.2)
    for k in (1, 3, 5):
        with numkit.AllocMeter() as meter:
            p, r = neumann_factors(q, k)
        assert meter.flops == 2 * k * 8 ** 3
        assert np.allclose(r, (np.eye(8) + q) @ p, atol=1e-14)
        with numkit.AllocMeter() as kept:
            p_kept, r_kept, powers = neumann_power_factors(q, k)
        assert kept.flops == meter.flops
        assert len(powers) == k
        assert np.allclose(p_kept, p, atol=1e-13) and np.allclose(r_kept, r, atol=1e-13)

    powers = matrix_powers(q, 3)
    assert len(powers) == 4
    assert np.allclose(powers[3], q @ q @ q, atol=1e-14)


def test_norm_guard():
    """Test the divergence guard rejects generators with ||Q|| above it"""
    print("\n7. Testing norm guard...")

    cfg = NeumannConfig(k=5, norm_guard=0.9)
    big = np.array([[0.0, 0.95], [-0.95, 0.0]])
    with pytest.raises(DivergenceRiskError) as info:
        cayley_neumann(big, cfg)
    assert abs(info.value.norm_estimate - 0.95) < 1e-9

    small = np.array([[0.0, 0.3], [-0.3, 0.0]])
    assert orthogonality_error(cayley_neumann(small, cfg)) < 1e-2


def test_rejects_non_skew_and_bad_config():
    """Test non-skew generators and invalid Neumann settings are refused"""
    print("\n8. Testing input validation...")

    with pytest.raises(SymmetryViolationError):
        cayley_exact(np.eye(3))
    with pytest.raises(SymmetryViolationError):
        cayley_neumann(np.array([[0.0, 1.0], [0.5, 0.0]]))
    with pytest.raises(ConfigError):
        NeumannConfig(k=0)
    with pytest.raises(ConfigError):
        NeumannConfig(norm_guard=1.5)


def run_all_tests():
    print("=" * 60)
    print("CAYLEY TESTS")
    print("=" * 60)
    test_exact_is_rotation()
    test_closed_form_2x2()
    test_neumann_odd_k_2x2()
    test_neumann_tail_bound_and_convergence()
    test_zero_generator_is_identity()
    test_neumann_cost()
    test_norm_guard()
    test_rejects_non_skew_and_bad_config()
    print("\n" + "=" * 60)
    print("All cayley tests passed")


if __name__ == "__main__":
    run_all_tests()
