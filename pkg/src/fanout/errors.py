"""Exception types shared across the engine, layout, grammar and pipeline."""


class FanoutError(Exception):
    """Base class for every error raised by this package."""


class InvalidConfigError(FanoutError):
    """Model or decode configuration violates an invariant."""


class LengthMismatchError(FanoutError):
    """token_ids, position_ids and mask_rows of a request differ in length."""


class MaskOutOfRangeError(FanoutError):
    """A mask row references an index outside the cache, or omits the row itself."""


class CacheTruncationError(FanoutError):
    """Requested truncation length exceeds the current cache length."""


class ScriptUndefinedError(FanoutError):
    """A scripted engine was queried on a visible sequence its script cannot continue."""


class NonFiniteLogitsError(FanoutError):
    """The numeric engine produced NaN or Inf logits."""


class LayoutError(FanoutError):
    """Invalid sequence layout (empty branch set, empty title, bad step order)."""


class NoMarkFoundError(FanoutError):
    """Stage-1 output contains no step marker; caller should fall back to plain decoding."""


class MalformedBranchError(FanoutError):
    """A step marker is not followed by a non-empty title and a colon."""


class SkeletonCapExceededError(FanoutError):
    """Stage 1 hit its token cap before the block terminator appeared."""


class ContinuationCapExceededError(FanoutError):
    """Stage 3 hit its token cap before EOS or a new step marker.

    Carries the tokens decoded so far so callers can salvage the partial
    continuation (the cache already holds them).
    """

    def __init__(self, message, tokens=None, stats=None):
        super().__init__(message)
        self.tokens = list(tokens) if tokens is not None else []
        self.stats = stats


class InvalidTaskError(FanoutError):
    """Task generator parameters out of range (e.g. branch count)."""
