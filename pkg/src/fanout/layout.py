"""Sequence layout for a branch-parallel block, and the tree mask over it.

Every cache slot is classified as one of:

* ``PREFIX``  - shared tokens before the block (plain causal among themselves),
* ``TITLE``   - a branch's title tokens, re-encoded with positions restarting
                at ``block_start`` so each branch is numbered as if it directly
                followed the prefix,
* ``BODY``    - one slot per branch per decoding step; every slot of step t
                carries the single shared position ``block_start + max_title_len + t``,
                and consecutive steps differ by exactly one,
* ``PAD``     - filler slots submitted for already-terminated branches; written
                to the cache but visible to no later query,
* ``CONT``    - sequential tokens after the block (stage-3 re-encode and
                continuation), plain causal over prefix + earlier CONT.

Visibility law: a query q sees exactly itself, every PREFIX entry at a lower
index, and - when q belongs to a branch - the TITLE/BODY entries of its own
branch that precede it. CONT queries additionally see all TITLE/BODY content
(never PAD) and earlier CONT entries. With a single branch and no padding
this collapses to an ordinary causal mask.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .engine import MaskRow, MaskRowParts
from .errors import LayoutError


class Kind(Enum):
    PREFIX = "prefix"
    TITLE = "title"
    BODY = "body"
    PAD = "pad"
    CONT = "cont"


@dataclass(frozen=True)
class Entry:
    index: int
    kind: Kind
    branch: int | None
    step: int | None
    position: int


class SequenceLayout:
    """Maps every cache slot to (kind, branch, step, position id).

    Built with the prefix and titles in place; BODY/PAD slots are appended
    step-major as decoding proceeds, CONT slots after the block. The layout
    is the single source of truth for mask rows and position ids.
    """

    def __init__(self, prefix_len: int, title_lens):
        title_lens = list(title_lens)
        if not title_lens:
            raise LayoutError("empty branch set")
        if prefix_len < 0:
            raise LayoutError(f"negative prefix length {prefix_len}")
        for i, n in enumerate(title_lens):
            if n < 1:
                raise LayoutError(f"branch {i} has an empty title")
        self.block_start = prefix_len
        self.n_branches = len(title_lens)
        self.title_lens = tuple(title_lens)
        self.max_title_len = max(title_lens)
        self.entries: list[Entry] = [
            Entry(i, Kind.PREFIX, None, None, i) for i in range(prefix_len)
        ]
        # Ascending entry indices per branch, titles first then body slots.
        self.branch_entries: list[list[int]] = [[] for _ in range(self.n_branches)]
        for b, tl in enumerate(title_lens):
            for j in range(tl):
                idx = len(self.entries)
                self.entries.append(Entry(idx, Kind.TITLE, b, None, prefix_len + j))
                self.branch_entries[b].append(idx)
        self.steps_appended = 0
        self.cont_count = 0

    def __len__(self) -> int:
        return len(self.entries)

    def step_position(self, step: int) -> int:
        if step < 0:
            raise LayoutError(f"negative step {step}")
        return self.block_start + self.max_title_len + step

    def title_indices(self, branch: int) -> list[int]:
        return self.branch_entries[branch][: self.title_lens[branch]]

    def append_step(self, active) -> list[int]:
        """Append one slot per branch for the next decoding step.

        ``active`` holds one flag per branch; inactive branches get PAD slots.
        Returns the new entry indices in branch order.
        """
        if len(active) != self.n_branches:
            raise LayoutError(f"expected {self.n_branches} flags, got {len(active)}")
        step = self.steps_appended
        pos = self.step_position(step)
        out = []
        for b, is_active in enumerate(active):
            idx = len(self.entries)
            kind = Kind.BODY if is_active else Kind.PAD
            self.entries.append(Entry(idx, kind, b, step, pos))
            if is_active:
                self.branch_entries[b].append(idx)
            out.append(idx)
        self.steps_appended += 1
        return out

    def append_continuation(self, count: int = 1) -> list[int]:
        """Append sequential post-block slots (positions continue from block_start)."""
        out = []
        for _ in range(count):
            idx = len(self.entries)
            pos = self.block_start + self.cont_count
            self.entries.append(Entry(idx, Kind.CONT, None, None, pos))
            self.cont_count += 1
            out.append(idx)
        return out

    def truncate_to_prefix(self) -> None:
        """Drop everything at or past block_start (stage-3 entry point)."""
        del self.entries[self.block_start:]
        self.branch_entries = [[] for _ in range(self.n_branches)]
        self.steps_appended = 0
        self.cont_count = 0

    def positions_of(self, indices) -> list[int]:
        return [self.entries[i].position for i in indices]

    def visible_row(self, q: int) -> MaskRow:
        """The mask row for query slot q under the visibility law."""
        e = self.entries[q]
        if e.kind is Kind.PREFIX:
            return range(0, q + 1)
        if e.kind is Kind.PAD:
            return MaskRowParts(0, (q,))
        if e.kind is Kind.CONT:
            if self.steps_appended == 0 and not any(self.branch_entries):
                # pure prefix + CONT layout: ordinary causal
                return range(0, q + 1)
            vis = list(range(self.block_start))
            for entry in self.entries[self.block_start: q]:
                if entry.kind in (Kind.TITLE, Kind.BODY) or entry.kind is Kind.CONT:
                    vis.append(entry.index)
            vis.append(q)
            return vis
        # TITLE or BODY: shared prefix + own branch up to and including q
        own = self.branch_entries[e.branch]
        upto = bisect_right(own, q)
        return MaskRowParts(self.block_start, tuple(own[:upto]))


class TreeMask:
    """Query -> set-of-visible-keys relation realized from a layout."""

    def __init__(self, layout: SequenceLayout):
        self.n = len(layout)
        self._rows = [layout.visible_row(q) for q in range(self.n)]

    def visible(self, q: int) -> frozenset[int]:
        row = self._rows[q]
        if isinstance(row, range):
            return frozenset(row)
        if isinstance(row, MaskRowParts):
            return frozenset(range(row.stop)) | frozenset(row.extras)
        return frozenset(row)

    def matrix(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        for q in range(self.n):
            m[q, sorted(self.visible(q))] = True
        return m


def build_layout(prefix_len: int, title_lens) -> SequenceLayout:
    return SequenceLayout(prefix_len, title_lens)


def tree_mask(layout: SequenceLayout) -> TreeMask:
    return TreeMask(layout)


def step_positions(layout: SequenceLayout, step: int) -> int:
    """Shared position id of every row submitted at decoding step ``step``."""
    return layout.step_position(step)


def mask_grid(layout: SequenceLayout) -> str:
    """Text grid of the mask: rows are queries, columns keys, '1' visible, '·' not."""
    mask = tree_mask(layout)
    lines = []
    for q in range(mask.n):
        vis = mask.visible(q)
        lines.append("".join("1" if k in vis else "·" for k in range(mask.n)))
    return "\n".join(lines)
