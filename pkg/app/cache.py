"""In-process cache for parameter-free curvature tables."""

import hashlib
import logging
from collections import OrderedDict
from typing import Any, Callable

import numpy as np

logger = logging.getLogger(__name__)


# ── Bounded in-memory store ─────────────────────────────────────────

class GramCache:
    """Dict-backed cache with insertion-order eviction and hit/miss stats."""

    def __init__(self, max_entries: int = 64):
        self._store: OrderedDict[str, Any] = OrderedDict()
        self._max_entries = max_entries
        self._hits = 0
        self._misses = 0

    def get(self, key: str) -> Any | None:
        value = self._store.get(key)
        if value is None:
            self._misses += 1
            return None
        self._hits += 1
        return value

    def set(self, key: str, value: Any):
        self._store[key] = value
        while len(self._store) > self._max_entries:
            evicted, _ = self._store.popitem(last=False)
            logger.debug(f"Evicted gram table {evicted[:12]}")

    def get_or_build(self, key: str, build: Callable[[], Any]) -> Any:
        value = self.get(key)
        if value is None:
            value = build()
            self.set(key, value)
        return value

    def clear(self):
        self._store.clear()

    @property
    def size(self) -> int:
        return len(self._store)

    @property
    def stats(self) -> dict:
        total = self._hits + self._misses
        return {
            "size": self.size,
            "hits": self._hits,
            "misses": self._misses,
            "hit_rate": round(self._hits / total, 3) if total > 0 else 0.0,
        }


# ── Keys ────────────────────────────────────────────────────────────

def array_digest(*arrays: np.ndarray, tag: str = "") -> str:
    """Stable key from array contents (dtype, shape and bytes)."""
    h = hashlib.sha1(tag.encode("utf-8"))
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode("utf-8"))
        h.update(a.tobytes())
    return h.hexdigest()


def _init_cache() -> GramCache:
    from app.config import settings
    return GramCache(max_entries=settings.gram_cache_size)


gram_cache = _init_cache()


def get_all_cache_stats() -> dict:
    return {"gram": gram_cache.stats}
