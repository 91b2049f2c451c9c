import re

import numpy as np
import pytest

from fanout import vocab
from fanout.errors import InvalidTaskError, MalformedBranchError, NoMarkFoundError
from fanout.grammar import (ForcingState, Skeleton, advance_forcing, apply_forcing,
                            instruction_tokens, parse_skeleton, stage1_prompt)


def render_skeleton(sk: Skeleton) -> list[int]:
    """Test-only inverse of parse_skeleton."""
    out = list(sk.preamble)
    for title in sk.titles:
        out.append(vocab.MARK)
        out.extend(title)
        out.extend((vocab.COLON, vocab.ELLIPSIS))
    out.append(vocab.MARK)
    if sk.terminated:
        out.append(vocab.TERM)
    return out


def test_forcing_after_colon_pins_ellipsis():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = rng.normal(size=vocab.VOCAB_SIZE).astype(np.float32)
        masked = apply_forcing(ForcingState.AFTER_COLON, logits)
        assert int(np.argmax(masked)) == vocab.ELLIPSIS


def test_forcing_after_ellipsis_pins_marker_or_terminator():
    rng = np.random.default_rng(1)
    for _ in range(20):
        logits = rng.normal(size=vocab.VOCAB_SIZE).astype(np.float32)
        masked = apply_forcing(ForcingState.AFTER_ELLIPSIS, logits)
        assert int(np.argmax(masked)) in (vocab.MARK, vocab.TERM)


def test_forcing_free_states_pass_through():
    logits = np.arange(vocab.VOCAB_SIZE, dtype=np.float32)
    assert apply_forcing(ForcingState.FREE, logits) is logits
    assert apply_forcing(ForcingState.TITLE, logits) is logits


def test_transitions_colon_only_counts_inside_title():
    s = ForcingState.FREE
    s = advance_forcing(s, vocab.COLON)          # preamble colon stays inert
    assert s is ForcingState.FREE
    s = advance_forcing(s, vocab.MARK)
    assert s is ForcingState.TITLE
    s = advance_forcing(s, ord("a"))
    assert s is ForcingState.TITLE
    s = advance_forcing(s, vocab.COLON)
    assert s is ForcingState.AFTER_COLON
    s = advance_forcing(s, vocab.ELLIPSIS)
    assert s is ForcingState.AFTER_ELLIPSIS
    assert advance_forcing(s, vocab.TERM) is ForcingState.FREE
    assert advance_forcing(s, vocab.MARK) is ForcingState.TITLE


def test_parse_two_branch_example():
    tokens = (vocab.encode("Let us analyze. ")
              + [vocab.MARK] + vocab.encode("Doc 1") + [vocab.COLON, vocab.ELLIPSIS]
              + [vocab.MARK] + vocab.encode("Doc 2") + [vocab.COLON, vocab.ELLIPSIS]
              + [vocab.MARK, vocab.TERM])
    sk = parse_skeleton(tokens)
    assert sk.n == 2
    assert [vocab.decode(t) for t in sk.titles] == ["Doc 1", "Doc 2"]
    assert sk.block_start == len(vocab.encode("Let us analyze. "))
    assert sk.terminated
    assert vocab.decode(sk.preamble) == "Let us analyze. "


def test_parse_counts_ten_groups_against_string_scan():
    text = "go " + "".join(f"####Item {c}:......" for c in "ABCDEFGHIJ") + "####%%%%"
    # independent oracle: count branch-opening markers in the raw string
    expected_n = len(re.findall(r"####(?!%%%%)", text))
    sk = parse_skeleton(vocab.encode(text))
    assert sk.n == expected_n == 10


def test_parse_no_marker_raises():
    with pytest.raises(NoMarkFoundError):
        parse_skeleton(vocab.encode("plain text with no markers at all"))


def test_parse_terminator_without_closing_marker_accepted():
    tokens = ([vocab.MARK] + vocab.encode("T") + [vocab.COLON, vocab.ELLIPSIS]
              + [vocab.TERM])
    sk = parse_skeleton(tokens)
    assert sk.n == 1 and sk.terminated


def test_parse_malformed_branches():
    with pytest.raises(MalformedBranchError):
        parse_skeleton([vocab.MARK, vocab.MARK, vocab.TERM])  # no title/colon
    with pytest.raises(MalformedBranchError):
        parse_skeleton([vocab.MARK, vocab.COLON, vocab.ELLIPSIS, vocab.TERM])
    with pytest.raises(MalformedBranchError):
        parse_skeleton([vocab.MARK] + vocab.encode("ab") + [vocab.TERM])
    with pytest.raises(MalformedBranchError):
        parse_skeleton([vocab.MARK] + vocab.encode("ab") + [vocab.ELLIPSIS,
                                                            vocab.TERM])


def test_parse_stops_at_terminator():
    tokens = ([vocab.MARK] + vocab.encode("T") + [vocab.COLON, vocab.ELLIPSIS,
                                                  vocab.MARK, vocab.TERM]
              + vocab.encode("trailing junk #### more"))
    sk = parse_skeleton(tokens)
    assert sk.n == 1 and sk.terminated


def test_degenerate_empty_block_falls_back():
    with pytest.raises(NoMarkFoundError):
        parse_skeleton(vocab.encode("pre ") + [vocab.MARK, vocab.TERM])


def test_parse_render_round_trip():
    rng = np.random.default_rng(7)
    for _ in range(100):
        preamble = [int(t) for t in rng.integers(97, 123, int(rng.integers(0, 8)))]
        titles = [[int(t) for t in rng.integers(97, 123, int(rng.integers(1, 6)))]
                  for _ in range(int(rng.integers(1, 5)))]
        sk = Skeleton(preamble, titles, len(preamble), True)
        parsed = parse_skeleton(render_skeleton(sk))
        assert parsed.preamble == sk.preamble
        assert parsed.titles == sk.titles
        assert parsed.block_start == sk.block_start
        assert parsed.terminated == sk.terminated


def test_stage1_prompt_carries_instruction_block():
    prompt = stage1_prompt("analyze A,B")
    instr = instruction_tokens()
    assert prompt[-len(instr):] == instr
    text = vocab.decode(prompt)
    assert text.startswith("analyze A,B")
    assert vocab.encode(text) == prompt          # tokenizer round trip
    assert "####" in text and "%%%%" in text and "......" in text


def test_stage1_prompt_rejects_empty_task():
    with pytest.raises(InvalidTaskError):
        stage1_prompt("")


def test_empty_instruction_asset_is_configuration_error(monkeypatch):
    from fanout import grammar
    from fanout.errors import InvalidConfigError
    monkeypatch.setattr(grammar, "_INSTRUCTIONS", None)
    monkeypatch.setattr(grammar, "_load_instruction_text", lambda: "  \n")
    with pytest.raises(InvalidConfigError):
        grammar.instruction_tokens()


def test_skeleton_json_dump():
    sk = parse_skeleton(vocab.encode("pre ####One:......####Two:......####%%%%"))
    dump = sk.to_json()
    assert dump["titles"] == ["One", "Two"]
    assert dump["n"] == 2
    assert dump["block_start"] == len("pre ")
    assert dump["terminated"] is True
