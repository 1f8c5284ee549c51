"""Counter-based per-path random streams.

Every Monte-Carlo path draws from its own Philox stream keyed by
``(seed, path_index)``, so ensembles are bit-identical no matter how paths
are chunked or distributed across workers.
"""

from __future__ import annotations

import numpy as np

__all__ = ["path_rng", "chunk_normals", "chunk_uniforms"]


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for one path, a pure function of (seed, index)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


def chunk_normals(seed: int, lo: int, hi: int, n: int) -> np.ndarray:
    """Standard normals of shape ``(hi - lo, n)``, one stream per path row."""
    out = np.empty((hi - lo, n))
    for i in range(lo, hi):
        out[i - lo] = path_rng(seed, i).standard_normal(n)
    return out


def chunk_uniforms(seed: int, lo: int, hi: int, n: int, salt: int = 0x5EED) -> np.ndarray:
    """Uniforms of shape ``(hi - lo, n)`` from a salted per-path stream.

    The salt keeps these draws independent of the normals consumed by the
    same path index.
    """
    out = np.empty((hi - lo, n))
    for i in range(lo, hi):
        ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(i), int(salt)))
        out[i - lo] = np.random.Generator(np.random.Philox(ss)).random(n)
    return out
