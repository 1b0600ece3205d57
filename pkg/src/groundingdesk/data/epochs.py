"""Chunked epochs over a large dataset: each epoch sees one contiguous segment."""

from __future__ import annotations

import math

from ..errors import ConfigError


def epoch_partition(n_items: int, chunk_size: int, epoch_index: int) -> range:
    """Indices visited in epoch ``epoch_index``.

    Segments are taken sequentially and the last one of a cycle is short when
    ``chunk_size`` does not divide ``n_items``; the next epoch restarts at 0.
    With n=1,200,000 and chunk=500,000 the lengths run 500k, 500k, 200k, 500k, ...
    """
    if chunk_size <= 0:
        raise ConfigError(f"chunk_size must be positive, got {chunk_size}")
    if n_items < 0 or epoch_index < 0:
        raise ConfigError("n_items and epoch_index must be non-negative")
    if n_items == 0:
        return range(0)
    cycle = math.ceil(n_items / chunk_size)
    k = epoch_index % cycle
    return range(k * chunk_size, min((k + 1) * chunk_size, n_items))


def epochs_per_cycle(n_items: int, chunk_size: int) -> int:
    if chunk_size <= 0:
        raise ConfigError(f"chunk_size must be positive, got {chunk_size}")
    return max(1, math.ceil(n_items / chunk_size))
