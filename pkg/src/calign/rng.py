"""Deterministic random streams.

Every random draw in the package flows from one splittable counter-based
generator. Streams are keyed by (seed, purpose, *indices); the key is hashed
into a Philox key, so any stream can be reproduced in isolation without
replaying the draws that preceded it.
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from .errors import ConfigError

THREADS_ENV = "CALIGN_THREADS"


def substream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Return an independent Generator for (seed, purpose, indices)."""
    tag = "|".join([str(int(seed)), purpose, *[str(int(i)) for i in indices]])
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def thread_count() -> int:
    """Worker cap from CALIGN_THREADS (default 1, i.e. sequential)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def parallel_map(fn, items):
    """Order-preserving map over items, using up to thread_count() workers.

    Results are gathered in submission order regardless of completion order,
    so the reduction downstream is deterministic.
    """
    items = list(items)
    n_workers = min(thread_count(), max(1, len(items)))
    if n_workers <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, items))
