"""Forward-engine interface: requests, caches, mask rows, greedy selection.

A forward pass processes a batch of rows. Each row carries a token id,
a position id, and an explicit set of visible cache indices (which may
include rows of the same request; a row is always visible to itself).
The engine appends one cache entry per row and returns one logit vector
per row.

Mask rows are logically sets of indices. Three concrete forms are
accepted so hot paths stay cheap:

* ``range(0, stop)``   - contiguous span (causal rows),
* ``MaskRowParts``     - contiguous ``[0, stop)`` span plus sorted extras
                         (tree-mask rows: shared prefix + own branch),
* any sequence of ints - fully explicit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence, Union

import numpy as np

from .errors import CacheTruncationError, LengthMismatchError, MaskOutOfRangeError


@dataclass(frozen=True)
class MaskRowParts:
    """Visible set = [0, stop) plus ``extras`` (ascending, all >= stop)."""

    stop: int
    extras: tuple[int, ...] = ()

    def __len__(self) -> int:
        return self.stop + len(self.extras)


MaskRow = Union[range, MaskRowParts, Sequence[int]]


class SequenceCache(Protocol):
    def __len__(self) -> int: ...

    def truncate(self, length: int) -> None: ...


@dataclass
class ForwardRequest:
    """One batched forward over ``cache``; appends len(token_ids) entries."""

    token_ids: Sequence[int]
    position_ids: Sequence[int]
    mask_rows: Sequence[MaskRow]
    cache: SequenceCache


class ForwardEngine(Protocol):
    vocab_size: int

    def new_cache(self) -> SequenceCache: ...

    def forward(self, request: ForwardRequest) -> np.ndarray: ...


def validate_request(request: ForwardRequest) -> int:
    """Check lengths and mask bounds; returns the number of rows."""
    n_rows = len(request.token_ids)
    if len(request.position_ids) != n_rows or len(request.mask_rows) != n_rows:
        raise LengthMismatchError(
            f"token_ids/position_ids/mask_rows lengths differ: "
            f"{n_rows}/{len(request.position_ids)}/{len(request.mask_rows)}"
        )
    final_len = len(request.cache) + n_rows
    for r, row in enumerate(request.mask_rows):
        self_idx = len(request.cache) + r
        if isinstance(row, range):
            if row.step != 1:
                raise MaskOutOfRangeError("mask ranges must have step 1")
            if row.start < 0 or row.stop > final_len:
                raise MaskOutOfRangeError(
                    f"row {r}: range [{row.start},{row.stop}) outside cache of {final_len}"
                )
            if not (row.start <= self_idx < row.stop):
                raise MaskOutOfRangeError(f"row {r} does not include itself")
        elif isinstance(row, MaskRowParts):
            if row.stop < 0 or row.stop > final_len:
                raise MaskOutOfRangeError(f"row {r}: span stop {row.stop} outside cache")
            ok_self = self_idx < row.stop
            prev = row.stop - 1
            for idx in row.extras:
                if idx <= prev:
                    raise MaskOutOfRangeError(f"row {r}: extras not strictly ascending")
                if idx >= final_len:
                    raise MaskOutOfRangeError(f"row {r}: index {idx} outside cache of {final_len}")
                ok_self = ok_self or idx == self_idx
                prev = idx
            if not ok_self:
                raise MaskOutOfRangeError(f"row {r} does not include itself")
        else:
            ok_self = False
            for idx in row:
                if idx < 0 or idx >= final_len:
                    raise MaskOutOfRangeError(f"row {r}: index {idx} outside cache of {final_len}")
                ok_self = ok_self or idx == self_idx
            if not ok_self:
                raise MaskOutOfRangeError(f"row {r} does not include itself")
    return n_rows


def row_index_array(row: MaskRow) -> np.ndarray:
    """Visible indices as an ascending int64 array."""
    if isinstance(row, range):
        return np.arange(row.start, row.stop, dtype=np.int64)
    if isinstance(row, MaskRowParts):
        out = np.empty(len(row), dtype=np.int64)
        out[: row.stop] = np.arange(row.stop)
        out[row.stop:] = row.extras
        return out
    return np.array(sorted(row), dtype=np.int64)


def gather_tokens(tokens: list[int], row: MaskRow) -> list[int]:
    """Visible token ids in cache order; slice fast paths for span rows."""
    if isinstance(row, range):
        return tokens[row.start: row.stop]
    if isinstance(row, MaskRowParts):
        out = tokens[: row.stop]
        out.extend(tokens[i] for i in row.extras)
        return out
    return [tokens[i] for i in sorted(row)]


def greedy_pick(logits_row: np.ndarray) -> int:
    """Temperature-0 selection; ties resolve to the lowest token id."""
    return int(np.argmax(logits_row))


class TokenCache:
    """Cache for engines that only need token ids and positions."""

    def __init__(self) -> None:
        self.tokens: list[int] = []
        self.positions: list[int] = []

    def __len__(self) -> int:
        return len(self.tokens)

    def truncate(self, length: int) -> None:
        if length > len(self.tokens):
            raise CacheTruncationError(
                f"truncate to {length} exceeds cache length {len(self.tokens)}"
            )
        del self.tokens[length:]
        del self.positions[length:]


class KVCache:
    """Per-layer key/value store; remembers the position each entry used.

    Entries are written once and never rewritten in place; truncation drops
    exactly the entries at index >= length. Buffers grow by doubling, so
    surviving entries keep their bit patterns.
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int, capacity: int = 64):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.length = 0
        self._capacity = capacity
        self.keys = [np.zeros((capacity, n_heads, head_dim), dtype=np.float32)
                     for _ in range(n_layers)]
        self.values = [np.zeros((capacity, n_heads, head_dim), dtype=np.float32)
                       for _ in range(n_layers)]
        self.positions = np.zeros(capacity, dtype=np.int64)

    def __len__(self) -> int:
        return self.length

    def ensure_capacity(self, total: int) -> None:
        if total <= self._capacity:
            return
        cap = self._capacity
        while cap < total:
            cap *= 2
        for layer in range(self.n_layers):
            for store in (self.keys, self.values):
                grown = np.zeros((cap, self.n_heads, self.head_dim), dtype=np.float32)
                grown[: self.length] = store[layer][: self.length]
                store[layer] = grown
        pos = np.zeros(cap, dtype=np.int64)
        pos[: self.length] = self.positions[: self.length]
        self.positions = pos
        self._capacity = cap

    def truncate(self, length: int) -> None:
        if length > self.length:
            raise CacheTruncationError(
                f"truncate to {length} exceeds cache length {self.length}"
            )
        self.length = length

    def snapshot(self, length: int | None = None):
        """Bitwise copy of the first ``length`` entries (for stability checks)."""
        n = self.length if length is None else length
        layers = [(self.keys[i][:n].copy(), self.values[i][:n].copy())
                  for i in range(self.n_layers)]
        return layers, self.positions[:n].copy()


def truncate_cache(cache: SequenceCache, length: int) -> SequenceCache:
    """Drop every entry at index >= length; entries below are untouched."""
    cache.truncate(length)
    return cache
