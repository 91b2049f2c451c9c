"""Byte-level vocabulary with atomic control tokens.

Token ids 0..255 are raw bytes. Control strings encode to single atomic
tokens (greedy longest match wins over byte fallback), so the grammar and
the parser never have to detect a marker across token boundaries.
"""

from __future__ import annotations

# Control token ids (all >= 256, distinct).
MARK = 256      # "####"  opens a parallel step
TERM = 257      # "%%%%"  closes a parallel block
ELLIPSIS = 258  # "......" stands in for a step body in the skeleton
COLON = 259     # ":"     ends a step title
PAD = 260       # filler row for terminated branches; never visible, never text
EOS = 261       # end of generation; never text

VOCAB_SIZE = 262

# Longest match first; byte fallback below.
_SPECIALS: list[tuple[bytes, int]] = [
    (b"......", ELLIPSIS),
    (b"####", MARK),
    (b"%%%%", TERM),
    (b":", COLON),
]

_SPECIAL_BYTES = {tok: s for s, tok in _SPECIALS}

TOKEN_NAMES = {MARK: "MARK", TERM: "TERM", ELLIPSIS: "ELLIPSIS",
               COLON: "COLON", PAD: "PAD", EOS: "EOS"}


def encode_bytes(data: bytes) -> list[int]:
    out: list[int] = []
    i = 0
    n = len(data)
    while i < n:
        for s, tok in _SPECIALS:
            if data.startswith(s, i):
                out.append(tok)
                i += len(s)
                break
        else:
            out.append(data[i])
            i += 1
    return out


def encode(text: str) -> list[int]:
    return encode_bytes(text.encode("utf-8"))


def decode_bytes(tokens) -> bytes:
    parts: list[bytes] = []
    for tok in tokens:
        if tok < 256:
            parts.append(bytes([tok]))
        elif tok in _SPECIAL_BYTES:
            parts.append(_SPECIAL_BYTES[tok])
        # PAD and EOS have no text form and are dropped.
    return b"".join(parts)


def decode(tokens) -> str:
    return decode_bytes(tokens).decode("utf-8", errors="replace")


def token_repr(tok: int) -> str:
    """Short human-readable form, for traces and error messages."""
    if tok in TOKEN_NAMES:
        return TOKEN_NAMES[tok]
    if 32 <= tok < 127:
        return repr(chr(tok))
    return f"byte({tok})"
