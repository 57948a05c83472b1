"""
Tests the per-adapter workspace cache
"""

import os
import sys
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

import numpy as np

import numkit
from cache_manager import WorkspaceCache
from oftlayer import BlockOrthogonalAdapter


def test_get_and_set():
    """Test entries are returned only for a matching key"""
    print("\n1. Testing get/set...")

    cache = WorkspaceCache()
    key = cache._generate_cache_key(np.array([0.1, 0.2]), 5)
    assert cache.get(0, key) is None
    cache.set(0, key, {"r": 1})
    assert cache.get(0, key) == {"r": 1}
    assert len(cache) == 1

    other = cache._generate_cache_key(np.array([0.1, 0.2]), 3)
    assert other != key
    assert cache.get(0, other) is None
    assert len(cache) == 0

    stats = cache.get_stats()
    assert stats == {"hits": 1, "misses": 2, "invalidations": 1, "hit_rate_percent": 33.33, "entries": 0}
    print(f"  {stats}")


def test_clear():
    """Test clear drops every entry and reports how many"""
    print("\n2. Testing clear...")

    cache = WorkspaceCache()
    for i in range(3):
        cache.set(i, str(i), {})
    assert cache.clear() == 3
    assert len(cache) == 0


def test_decorated_construction():
    """Test block constructions are cached per parameter value and skipped with use_cache=False"""
    print("\n3. Testing cache_construction...")

    a = BlockOrthogonalAdapter.random(8, 4, numkit.make_rng(0), scale=0.1)
    first = a.block_factors(0)
    assert first["cached"] is True
    assert a.block_factors(0) is first

    fresh = a.block_factors(0, use_cache=False)
    assert fresh["cached"] is False
    assert fresh is not first
    assert np.array_equal(fresh["r"], first["r"])

    a.blocks[0].u[:] = 0.0
    rebuilt = a.block_factors(0)
    assert rebuilt is not first
    assert np.array_equal(rebuilt["r"], np.eye(4))
    assert a.workspace.get_stats()["invalidations"] == 1


def run_all_tests():
    print("=" * 60)
    print("CACHE MANAGER TESTS")
    print("=" * 60)
    test_get_and_set()
    test_clear()
    test_decorated_construction()
    print("\n" + "=" * 60)
    print("All cache manager tests passed")


if __name__ == "__main__":
    run_all_tests()
