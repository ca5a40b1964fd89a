"""Seed splitting and an order-preserving process pool map.

Each replicate draws from its own stream derived from (top-level seed,
stream label, replicate index), so results never depend on how replicates
are distributed over workers.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np

STREAM_COVARIANCE = 1
STREAM_NULL = 2
STREAM_ALT = 3
STREAM_PAIRED = 4
STREAM_MISC = 5


def replicate_seed(seed: int, stream: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(index)))


def replicate_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(replicate_seed(seed, stream, index))


def _run_chunk(fn, args_chunk):
    return [fn(*args) for args in args_chunk]


def ordered_map(fn: Callable, arg_tuples: Sequence[tuple], workers: int = 1, chunks_per_worker: int = 4) -> list:
    """``[fn(*args) for args in arg_tuples]``, optionally across processes.

    ``fn`` must be a module-level function.  Output order matches input
    order for any worker count.
    """
    arg_tuples = list(arg_tuples)
    if workers is None or workers <= 1 or len(arg_tuples) < 2:
        return _run_chunk(fn, arg_tuples)
    workers = min(workers, len(arg_tuples))
    n_chunks = max(1, min(len(arg_tuples), workers * chunks_per_worker))
    bounds = np.linspace(0, len(arg_tuples), n_chunks + 1).astype(int)
    chunks = [arg_tuples[bounds[i] : bounds[i + 1]] for i in range(n_chunks)]
    out = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_run_chunk, [fn] * len(chunks), chunks):
            out.extend(part)
    return out
