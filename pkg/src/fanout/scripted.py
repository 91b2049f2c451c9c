"""Rule-based forward engine driven by a next-token script.

The script is a pure function of the visible token subsequence (in cache
order, including the row's own token). It must honor masks by construction:
it never sees invisible tokens, so they cannot influence its output. Logits
are one-hot-shaped (1.0 at the scripted token, 0.0 elsewhere), which keeps
greedy selection and logit forcing composable: if forcing bans the scripted
token, the argmax falls to the lowest-id permitted token.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import vocab
from .engine import ForwardRequest, TokenCache, gather_tokens, validate_request
from .errors import ScriptUndefinedError

Script = Callable[[Sequence[int]], int]


class ScriptedEngine:
    def __init__(self, script: Script, vocab_size: int = vocab.VOCAB_SIZE):
        self.script = script
        self.vocab_size = vocab_size

    def new_cache(self) -> TokenCache:
        return TokenCache()

    def forward(self, request: ForwardRequest) -> np.ndarray:
        n_rows = validate_request(request)
        cache: TokenCache = request.cache
        cache.tokens.extend(request.token_ids)
        cache.positions.extend(request.position_ids)
        logits = np.zeros((n_rows, self.vocab_size), dtype=np.float32)
        for r in range(n_rows):
            visible = gather_tokens(cache.tokens, request.mask_rows[r])
            tok = self.script(visible)
            if tok is None:
                raise ScriptUndefinedError(
                    f"script has no continuation for a visible sequence of "
                    f"{len(visible)} tokens ending {visible[-8:]}"
                )
            if not 0 <= tok < self.vocab_size:
                raise ScriptUndefinedError(f"script returned out-of-vocab token {tok}")
            logits[r, tok] = 1.0
        return logits


def echo_script(reply: Sequence[int], prompt_len: int) -> Script:
    """Emit ``reply`` token by token after a prompt of known length, then EOS."""
    reply = list(reply)

    def script(visible: Sequence[int]) -> int:
        done = len(visible) - prompt_len
        if done < 0:
            return visible[-1]
        if done < len(reply):
            return reply[done]
        return vocab.EOS

    return script
