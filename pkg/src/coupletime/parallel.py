"""Deterministic replicate fan-out.

Monte Carlo work is split into fixed-size chunks, each driven by its own
substream keyed by the chunk index.  Workers only decide which thread runs a
chunk; the chunk decomposition and the stream assignment never change, so
results are identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

from .errors import InvalidParameterError
from .streams import RngStream

__all__ = ["CHUNK_SIZE", "chunk_counts", "run_chunked"]

CHUNK_SIZE = 16384


def chunk_counts(n: int, chunk: int = CHUNK_SIZE) -> list[int]:
    """Split n replicates into fixed-size chunks (last one ragged)."""
    if n < 1:
        raise InvalidParameterError(f"need at least one replicate, got {n}")
    if chunk < 1:
        raise InvalidParameterError(f"chunk size must be >= 1, got {chunk}")
    full, rem = divmod(n, chunk)
    return [chunk] * full + ([rem] if rem else [])


def run_chunked(fn, rng: RngStream, n: int, workers: int = 1, chunk: int = CHUNK_SIZE):
    """Run fn(stream, count) over fixed chunks; returns results in chunk order.

    Chunk i always receives rng.substream(i), so the output is a pure
    function of (rng, n, chunk) no matter how many workers execute it.
    """
    tasks = [(rng.substream(i), c) for i, c in enumerate(chunk_counts(n, chunk))]
    if workers <= 1 or len(tasks) == 1:
        return [fn(s, c) for s, c in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda sc: fn(sc[0], sc[1]), tasks))
