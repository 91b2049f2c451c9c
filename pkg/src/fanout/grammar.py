"""Skeleton grammar: prompt assembly, logit forcing, and skeleton parsing.

The skeleton format is: free-form preamble, then one ``#### <title>:......``
group per parallel step, closed by ``####%%%%``. Forcing pins the two places
the format is brittle: right after a title's colon only the ellipsis is
selectable, and right after an ellipsis only a step marker or the block
terminator is.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from importlib import resources

import numpy as np

from .vocab import COLON, ELLIPSIS, EOS, MARK, TERM, decode, encode
from .errors import InvalidConfigError, InvalidTaskError, MalformedBranchError, NoMarkFoundError


class ForcingState(Enum):
    """Automaton over emitted tokens.

    FREE and TITLE pass logits through; TITLE exists only so a colon is
    recognized as a title separator when (and only when) a marker opened
    a step - colons in the preamble stay inert.
    """

    FREE = "free"
    TITLE = "title"
    AFTER_COLON = "after_colon"
    AFTER_ELLIPSIS = "after_ellipsis"


def apply_forcing(state: ForcingState, logits: np.ndarray) -> np.ndarray:
    """Mask format-illegal tokens to -inf; identity in the pass-through states."""
    if state is ForcingState.AFTER_COLON:
        masked = np.full_like(logits, -np.inf)
        masked[ELLIPSIS] = logits[ELLIPSIS]
        return masked
    if state is ForcingState.AFTER_ELLIPSIS:
        masked = np.full_like(logits, -np.inf)
        masked[MARK] = logits[MARK]
        masked[TERM] = logits[TERM]
        return masked
    return logits


def advance_forcing(state: ForcingState, token: int) -> ForcingState:
    """Deterministic transition on the emitted token."""
    if token == MARK:
        return ForcingState.TITLE
    if token == TERM:
        return ForcingState.FREE
    if token == ELLIPSIS:
        return ForcingState.AFTER_ELLIPSIS
    if token == COLON and state is ForcingState.TITLE:
        return ForcingState.AFTER_COLON
    if state is ForcingState.TITLE and token < 256:
        return ForcingState.TITLE
    return ForcingState.FREE


@dataclass
class Skeleton:
    preamble: list[int]
    titles: list[list[int]]
    block_start: int            # token index of the first marker in the output
    terminated: bool            # block terminator was seen

    @property
    def n(self) -> int:
        return len(self.titles)

    def to_json(self) -> dict:
        return {
            "preamble": decode(self.preamble),
            "titles": [decode(t) for t in self.titles],
            "n": self.n,
            "block_start": self.block_start,
            "terminated": self.terminated,
        }


def parse_skeleton(tokens) -> Skeleton:
    """Extract preamble, branch titles and block start from stage-1 output.

    Tolerant-read: the terminator is accepted with or without its closing
    marker, and a trailing bare marker (cap or EOS cut the output) closes
    the block. Raises NoMarkFoundError when there is no marker or no
    complete branch (callers fall back to plain decoding), and
    MalformedBranchError when a marker is not followed by a non-empty
    title and a colon.
    """
    tokens = list(tokens)
    block_start = next((i for i, t in enumerate(tokens) if t == MARK), None)
    if block_start is None:
        raise NoMarkFoundError("no step marker in output")
    titles: list[list[int]] = []
    terminated = False
    i = block_start
    n_tokens = len(tokens)
    while i < n_tokens:
        tok = tokens[i]
        if tok == TERM:
            terminated = True
            break
        if tok == EOS:
            break
        if tok != MARK:
            raise MalformedBranchError(
                f"expected a step marker at token {i}, found id {tok}"
            )
        i += 1
        title: list[int] = []
        while i < n_tokens and tokens[i] not in (MARK, TERM, ELLIPSIS, COLON, EOS):
            title.append(tokens[i])
            i += 1
        if i >= n_tokens or tokens[i] == EOS:
            if title:
                raise MalformedBranchError("title opened but never reached ':'")
            break  # trailing bare marker: treat as the block's closing marker
        sep = tokens[i]
        if sep == COLON:
            if not title:
                raise MalformedBranchError("empty title before ':'")
            titles.append(title)
            i += 1
            if i < n_tokens and tokens[i] == ELLIPSIS:
                i += 1
            continue
        if sep == TERM:
            if title:
                raise MalformedBranchError("title interrupted by the block terminator")
            terminated = True
            break
        if sep == ELLIPSIS:
            raise MalformedBranchError("ellipsis inside a title")
        # sep == MARK
        raise MalformedBranchError("step marker with no title/colon before the next marker")
    if not titles:
        raise NoMarkFoundError("block closed without a single complete branch")
    return Skeleton(tokens[:block_start], titles, block_start, terminated)


_INSTRUCTIONS: list[int] | None = None


def _load_instruction_text() -> str:
    return resources.files("fanout.assets").joinpath(
        "stage1_instructions.txt").read_text("utf-8")


def instruction_tokens() -> list[int]:
    global _INSTRUCTIONS
    if _INSTRUCTIONS is None:
        text = _load_instruction_text()
        if not text.strip():
            raise InvalidConfigError("stage-1 instruction asset is empty")
        _INSTRUCTIONS = encode(text)
    return _INSTRUCTIONS


def stage1_prompt(task: str) -> list[int]:
    """Task text followed by the skeleton-format instruction block."""
    if not task:
        raise InvalidTaskError("task text must be non-empty")
    return encode(task) + encode("\n\n") + list(instruction_tokens())
