"""Seeded replicate streams and thread fan-out.

Replicate ``r`` of any resampling procedure draws from its own generator,
derived from ``(seed, r)``, so results do not depend on how replicates are
split across workers.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed

from .errors import InvalidConfig

THREADS_ENV = "SCLS_THREADS"


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, else ``$SCLS_THREADS``, else 1."""
    if threads is None:
        env = os.environ.get(THREADS_ENV, "").strip()
        if not env:
            return 1
        try:
            threads = int(env)
        except ValueError:
            raise InvalidConfig(f"{THREADS_ENV}={env!r} is not an integer") from None
    if threads < 1:
        raise InvalidConfig(f"threads must be >= 1, got {threads}")
    return int(threads)


def resolve_seed(seed: int | None) -> int:
    if seed is None:
        return int(np.random.SeedSequence().entropy % (2**63))
    seed = int(seed)
    if seed < 0:
        raise InvalidConfig(f"seed must be non-negative, got {seed}")
    return seed


def replicate_rng(seed: int, r: int, stream: int = 0) -> np.random.Generator:
    """Generator for replicate ``r``; ``stream`` separates unrelated uses of one seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, r)))


def chunked(n: int, parts: int) -> list[range]:
    parts = max(1, min(parts, n))
    edges = np.linspace(0, n, parts + 1).round().astype(int)
    return [range(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def map_chunks(func: Callable[[range], Sequence], n: int, threads: int) -> list:
    """Apply ``func`` to contiguous index chunks and concatenate in index order.

    Threads (not processes) are used: the heavy loops release the GIL.
    """
    if n == 0:
        return []
    threads = resolve_threads(threads)
    chunks = chunked(n, threads)
    if len(chunks) == 1:
        return list(func(chunks[0]))
    parts = Parallel(n_jobs=len(chunks), backend="threading")(delayed(func)(c) for c in chunks)
    return [x for part in parts for x in part]
