"""Counter-based Gaussian increments.

The normal draw for ``(seed, path, step)`` is a pure function of those three
integers: numpy's Philox4x64 keyed on ``(seed, path)`` with the block counter
set to ``step``.  Each block's first two 64-bit words feed one Box-Muller
transform.  Paths can therefore be generated in any order, in chunks, or in
parallel, and always produce the same numbers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

_TWO53 = float(2 ** 53)


def _key(seed: int, path: int) -> np.ndarray:
    return np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, int(path)], dtype=np.uint64)


def _box_muller(w0: np.ndarray, w1: np.ndarray) -> np.ndarray:
    u1 = ((w0 >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53   # (0, 1]
    u2 = (w1 >> np.uint64(11)).astype(np.float64) / _TWO53           # [0, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def normal_at(seed: int, path: int, step: int) -> float:
    """Standard normal for a single ``(seed, path, step)`` by direct counter access."""
    bg = np.random.Philox(key=_key(seed, path), counter=np.array([step, 0, 0, 0], dtype=np.uint64))
    w = bg.random_raw(2)
    return float(_box_muller(w[:1], w[1:])[0])


def path_normals(seed: int, path: int, n_steps: int) -> np.ndarray:
    """Standard normals for steps ``0..n_steps-1`` of one path."""
    raw = np.random.Philox(key=_key(seed, path)).random_raw(4 * n_steps).reshape(n_steps, 4)
    return _box_muller(raw[:, 0], raw[:, 1])


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("SMPV_THREADS", "1")))
    except ValueError:
        return 1


def normals(seed: int, paths, n_steps: int, threads: int | None = None) -> np.ndarray:
    """Block ``(len(paths), n_steps)`` of standard normals."""
    paths = np.asarray(paths, dtype=np.int64)
    out = np.empty((len(paths), n_steps))
    threads = thread_count() if threads is None else threads

    def fill(rows):
        for r in rows:
            out[r] = path_normals(seed, int(paths[r]), n_steps)

    rows = np.arange(len(paths))
    if threads <= 1 or len(paths) < 2 * threads:
        fill(rows)
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(fill, np.array_split(rows, threads)))
    return out
