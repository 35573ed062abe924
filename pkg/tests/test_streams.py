"""Stream determinism, grid exactness, and the chunked runner."""

import numpy as np
import pytest

from coupletime.errors import InvalidGridError, InvalidParameterError
from coupletime.parallel import CHUNK_SIZE, chunk_counts, run_chunked
from coupletime.streams import RngStream, TimeGrid, gaussian_increment


def test_same_stream_is_bit_identical():
    a = RngStream(7, 0).generator.standard_normal(64)
    b = RngStream(7, 0).generator.standard_normal(64)
    assert np.array_equal(a, b)


def test_distinct_streams_differ():
    a = RngStream(7, 0).generator.standard_normal(64)
    b = RngStream(7, 1).generator.standard_normal(64)
    c = RngStream(8, 0).generator.standard_normal(64)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_substreams_are_reproducible_and_disjoint():
    root = RngStream(123, 4)
    x = root.substream(9).generator.standard_normal(16)
    y = RngStream(123, 4).substream(9).generator.standard_normal(16)
    z = root.substream(10).generator.standard_normal(16)
    assert np.array_equal(x, y)
    assert not np.array_equal(x, z)


def test_time_grid_points_have_no_cumulative_drift():
    grid = TimeGrid(0.3, 0.1, 1000)
    times = grid.times()
    # t0 + k*dt computed directly, not by repeated addition
    for k in (1, 7, 999):
        assert times[k] == 0.3 + k * 0.1
    assert times.shape == (1001,)
    assert grid.t_end == times[-1]


def test_time_grid_validation():
    with pytest.raises(InvalidGridError):
        TimeGrid(0.0, -0.1, 10)
    with pytest.raises(InvalidGridError):
        TimeGrid(0.0, 0.1, 0)


def test_gaussian_increment_moments():
    g = gaussian_increment(RngStream(2, 0), 1.0, size=1_000_000)
    assert abs(g.mean()) < 0.004
    g = gaussian_increment(RngStream(2, 1), 0.25, size=1_000_000)
    assert abs(g.var() - 0.25) < 0.002


def test_gaussian_increment_first_draw_is_fixed():
    a = gaussian_increment(RngStream(7, 0), 1.0)
    b = gaussian_increment(RngStream(7, 0), 1.0)
    assert a == b
    with pytest.raises(InvalidGridError):
        gaussian_increment(RngStream(7, 0), 0.0)


def test_chunk_counts_cover_n():
    for n in (1, CHUNK_SIZE - 1, CHUNK_SIZE, CHUNK_SIZE + 1, 3 * CHUNK_SIZE + 7):
        counts = chunk_counts(n)
        assert sum(counts) == n
        assert all(c > 0 for c in counts)


def test_run_chunked_is_worker_invariant():
    def one_chunk(stream, count):
        return stream.generator.standard_normal(count).sum()

    n = 2 * CHUNK_SIZE + 1234
    ref = run_chunked(one_chunk, RngStream(5, 9), n, workers=1)
    for workers in (2, 4):
        out = run_chunked(one_chunk, RngStream(5, 9), n, workers=workers)
        assert out == ref


def test_run_chunked_rejects_bad_counts():
    with pytest.raises(InvalidParameterError):
        run_chunked(lambda s, c: 0.0, RngStream(1, 0), 0)
