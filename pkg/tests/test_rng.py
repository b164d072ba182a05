import numpy as np
import pytest

from smpv import rng
from smpv.sde import make_context


def test_counter_access_matches_bulk():
    bulk = rng.normals(7, [0, 3, 11], 20)
    assert bulk[1, 5] == rng.normal_at(7, 3, 5)
    assert bulk[2, 19] == rng.normal_at(7, 11, 19)


def test_chunks_and_threads_are_identical():
    a = rng.normals(1, np.arange(64), 30, threads=1)
    b = rng.normals(1, np.arange(64), 30, threads=4)
    c = np.vstack([rng.normals(1, np.arange(0, 20), 30), rng.normals(1, np.arange(20, 64), 30)])
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_seeds_differ_and_repeat():
    assert np.array_equal(rng.normals(5, [0], 10), rng.normals(5, [0], 10))
    assert not np.array_equal(rng.normals(5, [0], 10), rng.normals(6, [0], 10))


def test_standard_normal_moments():
    z = rng.normals(3, np.arange(2000), 50).ravel()
    n = z.size
    assert abs(z.mean()) < 4 / np.sqrt(n)
    assert abs(z.var() - 1) < 4 * np.sqrt(2 / n)
    assert abs(np.mean(z ** 3)) < 4 * np.sqrt(15 / n)
    assert np.all(np.isfinite(z))


def test_context_offset_batches_one_ensemble():
    full = make_context(1.0, 16, 300, 9)
    lo = make_context(1.0, 16, 100, 9)
    hi = make_context(1.0, 16, 200, 9, offset=100)
    assert np.array_equal(np.vstack([lo.dW, hi.dW]), full.dW)
    assert hi.increment(5, 3) == pytest.approx(full.dW[105, 3], abs=0)
    assert np.array_equal(full.subset(slice(100, 300)).dW, hi.dW)
    assert hi.provenance()["path_offset"] == 100


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("SMPV_THREADS", "3")
    assert rng.thread_count() == 3
    monkeypatch.setenv("SMPV_THREADS", "junk")
    assert rng.thread_count() == 1
