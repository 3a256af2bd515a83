import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rlsde import rng


def test_normals_are_pure_functions_of_key():
    a = rng.normals(7, rng.NOISE, [3, 4, 5], np.arange(10))
    b = rng.normals(7, rng.NOISE, [5, 4, 3], np.arange(10))
    np.testing.assert_array_equal(a, b[::-1])
    np.testing.assert_array_equal(rng.normals(7, rng.NOISE, [4], [6, 2]), a[1:2, [6, 2]])


def test_domains_and_seeds_differ():
    base = rng.uniforms(1, rng.COEFFICIENT, [0], np.arange(1000))
    for other in (rng.uniforms(1, rng.NOISE, [0], np.arange(1000)), rng.uniforms(2, rng.COEFFICIENT, [0], np.arange(1000))):
        assert not np.any(base == other)
        assert abs(np.corrcoef(base[0], other[0])[0, 1]) < 0.1


def test_uniforms_open_interval_and_uniform():
    u = rng.uniforms(0, rng.NOISE, np.arange(20), np.arange(5000)).ravel()
    assert u.min() > 0.0 and u.max() < 1.0
    assert stats.kstest(u, "uniform").pvalue > 1e-4


def test_normals_are_standard_normal():
    z = rng.normals(11, rng.COEFFICIENT, np.arange(50), np.arange(2000)).ravel()
    assert abs(z.mean()) < 4.0 / np.sqrt(z.size)
    assert z.var() == pytest.approx(1.0, abs=5 * np.sqrt(2.0 / z.size))
    assert stats.kstest(z, "norm").pvalue > 1e-4


def test_large_seed_and_stream_values_wrap():
    a = rng.uniforms(2**64 - 1, rng.NOISE, [2**63 + 5], [0, 1])
    b = rng.uniforms(-1, rng.NOISE, [2**63 + 5], [0, 1])
    np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.integers(1, 64), st.sampled_from([1, 2, 4, 8]))
def test_map_chunks_independent_of_workers(n, chunk, workers):
    items = np.arange(n)
    fn = lambda ids: rng.normals(3, rng.NOISE, ids, np.arange(4)).sum(axis=1)  # noqa: E731
    serial = np.concatenate(rng.map_chunks(fn, items, chunk, 1))
    parallel = np.concatenate(rng.map_chunks(fn, items, chunk, workers))
    np.testing.assert_array_equal(serial, parallel)


def test_map_chunks_preserves_order():
    out = rng.map_chunks(lambda ids: ids.copy(), np.arange(10), 3, 4)
    np.testing.assert_array_equal(np.concatenate(out), np.arange(10))
