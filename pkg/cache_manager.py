"""
Per-adapter workspace cache for Cayley-Neumann block constructions

Each block's (Q, P, R) is built once per parameter value and reused by the
backward pass; cached builds also keep the powers I, Q, ..., Q^{k-1} the
backward needs. Entries are keyed by a digest of the block's compact vector
and the Neumann order, so any update to u invalidates the entry.
"""

import hashlib
from functools import wraps
from typing import Any, Callable, Dict, Optional

import numpy as np


class WorkspaceCache:
    """Holds at most one construction per block index"""

    def __init__(self):
        self._entries: Dict[int, Dict[str, Any]] = {}
        self._keys: Dict[int, str] = {}
        self._stats = {"hits": 0, "misses": 0, "invalidations": 0}

    def _generate_cache_key(self, u: np.ndarray, k: int) -> str:
        """
        Generate a key from the parameter bytes

        Args:
            u: compact skew vector of the block
            k: Neumann order

        Returns:
            SHA256 hex digest
        """
        digest = hashlib.sha256()
        digest.update(str(u.dtype).encode())
        digest.update(str(k).encode())
        digest.update(np.ascontiguousarray(u).tobytes())
        return digest.hexdigest()

    def get(self, index: int, cache_key: str) -> Optional[Dict[str, Any]]:
        """Return the entry for index if it was built from the same parameters"""
        stored = self._keys.get(index)
        if stored is None:
            self._stats["misses"] += 1
            return None
        if stored != cache_key:
            self._stats["misses"] += 1
            self._stats["invalidations"] += 1
            del self._keys[index]
            del self._entries[index]
            return None
        self._stats["hits"] += 1
        return self._entries[index]

    def set(self, index: int, cache_key: str, entry: Dict[str, Any]) -> None:
        self._keys[index] = cache_key
        self._entries[index] = entry

    def clear(self) -> int:
        """
        Drop every entry

        Returns:
            Number of entries removed
        """
        count = len(self._entries)
        self._entries.clear()
        self._keys.clear()
        return count

    def __len__(self) -> int:
        return len(self._entries)

    def get_stats(self) -> Dict[str, Any]:
        """
        Get cache statistics

        Returns:
            Dict with hits, misses, invalidations, and hit rate
        """
        total = self._stats["hits"] + self._stats["misses"]
        hit_rate = (self._stats["hits"] / total * 100) if total > 0 else 0

        return {
            "hits": self._stats["hits"],
            "misses": self._stats["misses"],
            "invalidations": self._stats["invalidations"],
            "hit_rate_percent": round(hit_rate, 2),
            "entries": len(self._entries),
        }


def cache_construction(enabled_by_default: bool = True):
    """
    Decorator for adapter methods of the form method(self, index, cached) -> entry

    The adapter must expose .workspace (WorkspaceCache), .blocks and
    .neumann. Pass use_cache=False to force a fresh, uncached build; the
    returned entry then carries cached=False so callers can release it.
    The method is told whether its entry will be stored, so it can keep
    extra state only for reused entries.
    """
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(self, index: int, **kwargs):
            use_cache = kwargs.pop("use_cache", enabled_by_default)

            if not use_cache:
                entry = func(self, index, cached=False, **kwargs)
                entry["cached"] = False
                return entry

            cache = self.workspace
            cache_key = cache._generate_cache_key(self.blocks[index].u, self.neumann.k)

            entry = cache.get(index, cache_key)
            if entry is not None:
                return entry

            entry = func(self, index, cached=True, **kwargs)
            entry["cached"] = True
            cache.set(index, cache_key, entry)
            return entry

        return wrapper
    return decorator
