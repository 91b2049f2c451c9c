"""Three-stage branch-parallel decoding over one sequence and one KV cache.

Stage 1 decodes a skeleton under logit forcing: preamble, then one
``#### title:......`` group per parallel step, closed by ``####%%%%``.
Stage 2 truncates the cache back to the shared prefix, re-encodes all
titles in one batched tree-masked pass, then advances every active branch
by one token per forward pass: the step-0 pass submits each branch's last
title token, later passes submit the branch's previously emitted token,
and all rows of a step share one position id (incremented by one per step).
A branch terminates when its greedy token is the step marker; terminated
branches submit globally-invisible PAD rows until the block finishes.
Stage 3 truncates to the prefix again, prefills the flattened block
(marker, title, colon, body per branch, then marker+terminator) causally
with sequential positions, and resumes plain greedy decoding. A new marker
in the continuation loops back to stage 1 for the next block.

Token accounting (used by the bench): a stage's ``decode_tokens`` counts
the content tokens it contributes to the sequence - skeleton tokens for
stage 1, body tokens for stage 2 (terminator marks and PAD rows are not
content), continuation tokens for stage 3. ``decode_passes`` counts decode
loop passes; selections read off a prefill's logits are free. Plain causal
decoding therefore measures exactly 1.0 content tokens per decode pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .engine import ForwardEngine, ForwardRequest, SequenceCache, greedy_pick
from .errors import (
    ContinuationCapExceededError,
    FanoutError,
    NoMarkFoundError,
    SkeletonCapExceededError,
)
from .grammar import (ForcingState, Skeleton, advance_forcing, apply_forcing,
                      parse_skeleton, stage1_prompt)
from .layout import SequenceLayout, build_layout

MAX_BLOCKS = 64  # hard guard against marker loops; not a tunable


@dataclass
class DecodeConfig:
    """Caps for the three stages. Selection is always greedy (temperature 0)
    with ties resolved to the lowest token id."""

    max_skeleton_tokens: int = 512
    max_steps_per_branch: int = 128
    max_continuation_tokens: int = 512

    def validate(self) -> "DecodeConfig":
        for name in ("max_skeleton_tokens", "max_steps_per_branch",
                     "max_continuation_tokens"):
            if getattr(self, name) < 1:
                raise FanoutError(f"{name} must be >= 1")
        return self

    @property
    def plain_cap(self) -> int:
        # generous bound for normal-mode/fallback decoding: a full parallel
        # answer at the branch-count ceiling fits under it
        return (self.max_skeleton_tokens + 16 * self.max_steps_per_branch
                + self.max_continuation_tokens)


@dataclass
class StageStats:
    prefill_passes: int = 0
    decode_passes: int = 0
    prefill_tokens: int = 0
    decode_tokens: int = 0
    wall_s: float = 0.0

    def merge(self, other: "StageStats") -> None:
        self.prefill_passes += other.prefill_passes
        self.decode_passes += other.decode_passes
        self.prefill_tokens += other.prefill_tokens
        self.decode_tokens += other.decode_tokens
        self.wall_s += other.wall_s

    def to_json(self) -> dict:
        return {
            "prefill_passes": self.prefill_passes,
            "decode_passes": self.decode_passes,
            "prefill_tokens": self.prefill_tokens,
            "decode_tokens": self.decode_tokens,
            "wall_s": self.wall_s,
        }


@dataclass
class BranchState:
    terminated_at: int | None = None    # step index, or max_steps on cap
    reason: str | None = None           # "mark", "term" or "cap"

    @property
    def active(self) -> bool:
        return self.terminated_at is None


@dataclass
class ParallelBlock:
    layout: SequenceLayout
    titles: list[list[int]]
    states: list[BranchState]
    bodies: list[list[int]]
    max_steps: int
    step_logits: list[list[np.ndarray]] | None = None

    @property
    def n(self) -> int:
        return len(self.titles)


@dataclass
class DecodeTrace:
    mode: str
    stages: dict[str, StageStats] = field(default_factory=dict)
    block_count: int = 0
    final_tokens: list[int] = field(default_factory=list)
    final_text: str = ""
    stage2_step_positions: list[list[list[int]]] = field(default_factory=list)
    skeletons: list[dict] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    wall_s: float = 0.0

    def stage(self, name: str) -> StageStats:
        return self.stages.setdefault(name, StageStats())

    @property
    def decode_tokens(self) -> int:
        return sum(s.decode_tokens for s in self.stages.values())

    @property
    def decode_passes(self) -> int:
        return sum(s.decode_passes for s in self.stages.values())

    @property
    def prefill_passes(self) -> int:
        return sum(s.prefill_passes for s in self.stages.values())

    @property
    def prefill_tokens(self) -> int:
        return sum(s.prefill_tokens for s in self.stages.values())

    @property
    def tokens_per_pass(self) -> float:
        return self.decode_tokens / self.decode_passes if self.decode_passes else 0.0

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "stages": {k: v.to_json() for k, v in self.stages.items()},
            "totals": {
                "decode_tokens": self.decode_tokens,
                "decode_passes": self.decode_passes,
                "prefill_passes": self.prefill_passes,
                "prefill_tokens": self.prefill_tokens,
                "tokens_per_pass": self.tokens_per_pass,
            },
            "block_count": self.block_count,
            "final_text": self.final_text,
            "skeletons": list(self.skeletons),
            "stage2_step_positions": [
                [[int(p) for p in step] for step in block]
                for block in self.stage2_step_positions
            ],
            "events": list(self.events),
            "wall_s": self.wall_s,
        }


def _prefill(engine: ForwardEngine, cache: SequenceCache, tokens, positions) -> np.ndarray:
    base = len(cache)
    rows = [range(0, base + i + 1) for i in range(len(tokens))]
    return engine.forward(ForwardRequest(tokens, positions, rows, cache))


def _submit_one(engine: ForwardEngine, cache: SequenceCache, token: int,
                position: int) -> np.ndarray:
    row = range(0, len(cache) + 1)
    return engine.forward(ForwardRequest([token], [position], [row], cache))[0]


def run_stage1(engine: ForwardEngine, prompt_tokens, config: DecodeConfig,
               cache: SequenceCache, *, teacher_tokens=None):
    """Prefill the prompt and decode a skeleton greedily under forcing.

    Returns (skeleton, generated_tokens, stats). ``teacher_tokens``, when
    given, overrides each greedy selection (the forwards still run), which
    lets callers replay a known transcript through a numeric engine.
    Raises NoMarkFoundError - enriched with the tokens generated so far and
    the stop reason - when no complete branch appeared, and
    SkeletonCapExceededError when markers appeared but the cap cut the
    skeleton short.
    """
    t0 = time.perf_counter()
    stats = StageStats()
    if len(cache) != 0:
        raise FanoutError("stage 1 expects an empty cache")
    prompt_tokens = list(prompt_tokens)
    logits = _prefill(engine, cache, prompt_tokens, list(range(len(prompt_tokens))))
    stats.prefill_passes += 1
    stats.prefill_tokens += len(prompt_tokens)
    last_row = logits[-1]

    generated: list[int] = []
    state = ForcingState.FREE
    stop = "cap"
    while len(generated) < config.max_skeleton_tokens:
        masked = apply_forcing(state, last_row)
        if teacher_tokens is not None and len(generated) < len(teacher_tokens):
            tok = teacher_tokens[len(generated)]
        else:
            tok = greedy_pick(masked)
        if tok == vocab.EOS:
            stop = "eos"
            break
        generated.append(tok)
        stats.decode_tokens += 1
        if tok == vocab.TERM:
            stop = "term"
            break
        state = advance_forcing(state, tok)
        last_row = _submit_one(engine, cache, tok, len(cache))
        stats.decode_passes += 1
    stats.wall_s = time.perf_counter() - t0

    try:
        skeleton = parse_skeleton(generated)
    except NoMarkFoundError as exc:
        err = NoMarkFoundError(str(exc))
        err.tokens = generated
        err.stats = stats
        err.stop_reason = stop
        err.last_logits = last_row
        raise err from None
    if stop == "cap":
        raise SkeletonCapExceededError(
            f"skeleton cap {config.max_skeleton_tokens} hit before the terminator"
        )
    return skeleton, generated, stats


def run_stage2(engine: ForwardEngine, skeleton: Skeleton, config: DecodeConfig,
               cache: SequenceCache, *, keep_logits: bool = False):
    """Decode all branch bodies in parallel within the shared cache.

    Precondition: the cache holds exactly the non-parallel prefix. Returns
    (block, stats, step_position_log).
    """
    t0 = time.perf_counter()
    stats = StageStats()
    titles = [list(t) for t in skeleton.titles]
    layout = build_layout(len(cache), [len(t) for t in titles])
    n = layout.n_branches

    # one batched pass re-encodes every title under tree isolation;
    # its logits are not used for selection
    title_tokens = [tok for t in titles for tok in t]
    title_indices = [i for b in range(n) for i in layout.title_indices(b)]
    engine.forward(ForwardRequest(
        title_tokens,
        layout.positions_of(title_indices),
        [layout.visible_row(i) for i in title_indices],
        cache,
    ))
    stats.prefill_passes += 1
    stats.prefill_tokens += len(title_tokens)

    states = [BranchState() for _ in range(n)]
    bodies: list[list[int]] = [[] for _ in range(n)]
    step_logits: list[list[np.ndarray]] | None = [[] for _ in range(n)] if keep_logits else None
    position_log: list[list[int]] = []

    for step in range(config.max_steps_per_branch):
        flags = [st.active for st in states]
        if not any(flags):
            break
        row_tokens = []
        for b in range(n):
            if not flags[b]:
                row_tokens.append(vocab.PAD)
            elif step == 0:
                row_tokens.append(titles[b][-1])
            else:
                row_tokens.append(bodies[b][-1])
        indices = layout.append_step(flags)
        positions = layout.positions_of(indices)
        position_log.append(positions)
        logits = engine.forward(ForwardRequest(
            row_tokens, positions, [layout.visible_row(i) for i in indices], cache,
        ))
        stats.decode_passes += 1
        for b in range(n):
            if not flags[b]:
                continue
            if keep_logits:
                step_logits[b].append(logits[b].copy())
            tok = greedy_pick(logits[b])
            if tok == vocab.MARK or tok == vocab.TERM:
                states[b].terminated_at = step
                states[b].reason = "mark" if tok == vocab.MARK else "term"
            else:
                bodies[b].append(tok)
                stats.decode_tokens += 1
    for st in states:
        if st.active:
            st.terminated_at = config.max_steps_per_branch
            st.reason = "cap"

    # pass-accounting invariant
    needed = [len(bodies[b]) + (1 if states[b].reason in ("mark", "term") else 0)
              for b in range(n)]
    assert stats.decode_passes == max(needed), \
        f"stage-2 pass accounting: {stats.decode_passes} != max{needed}"
    assert stats.decode_passes <= config.max_steps_per_branch

    stats.wall_s = time.perf_counter() - t0
    block = ParallelBlock(layout, titles, states, bodies,
                          config.max_steps_per_branch, step_logits)
    return block, stats, position_log


def flatten_block(block: ParallelBlock) -> list[int]:
    """Sequential form of a decoded block: marker, title, colon, body per
    branch, then the closing marker + terminator."""
    out: list[int] = []
    for title, body in zip(block.titles, block.bodies):
        out.append(vocab.MARK)
        out.extend(title)
        out.append(vocab.COLON)
        out.extend(body)
    out.extend((vocab.MARK, vocab.TERM))
    return out


def run_stage3(engine: ForwardEngine, block: ParallelBlock, config: DecodeConfig,
               cache: SequenceCache):
    """Re-encode the flattened block over the reused prefix and keep decoding.

    Returns (continuation_tokens, stop_reason, stats) where stop_reason is
    "eos" or "mark"; a marker stop means a new block should begin (the
    marker itself is left to the next stage-1 turn). Raises
    ContinuationCapExceededError at the continuation cap.
    """
    t0 = time.perf_counter()
    stats = StageStats()
    layout = block.layout
    cache.truncate(layout.block_start)
    layout.truncate_to_prefix()

    flat = flatten_block(block)
    indices = layout.append_continuation(len(flat))
    logits = engine.forward(ForwardRequest(
        flat, layout.positions_of(indices),
        [layout.visible_row(i) for i in indices], cache,
    ))
    stats.prefill_passes += 1
    stats.prefill_tokens += len(flat)
    last_row = logits[-1]

    cont: list[int] = []
    while True:
        tok = greedy_pick(last_row)
        if tok == vocab.EOS:
            reason = "eos"
            break
        if tok == vocab.MARK:
            reason = "mark"
            break
        cont.append(tok)
        stats.decode_tokens += 1
        if len(cont) >= config.max_continuation_tokens:
            stats.wall_s = time.perf_counter() - t0
            raise ContinuationCapExceededError(
                f"continuation cap {config.max_continuation_tokens} hit",
                tokens=cont, stats=stats,
            )
        idx = layout.append_continuation(1)[0]
        last_row = engine.forward(ForwardRequest(
            [tok], [layout.entries[idx].position],
            [layout.visible_row(idx)], cache,
        ))[0]
        stats.decode_passes += 1
    stats.wall_s = time.perf_counter() - t0
    return cont, reason, stats


def _stage1_continue(engine: ForwardEngine, config: DecodeConfig,
                     cache: SequenceCache):
    """Stage-1 semantics resumed from a marker emitted in a continuation."""
    t0 = time.perf_counter()
    stats = StageStats()
    generated = [vocab.MARK]
    stats.decode_tokens += 1
    state = advance_forcing(ForcingState.FREE, vocab.MARK)
    last_row = _submit_one(engine, cache, vocab.MARK, len(cache))
    stats.decode_passes += 1
    stop = "cap"
    while len(generated) < config.max_skeleton_tokens:
        masked = apply_forcing(state, last_row)
        tok = greedy_pick(masked)
        if tok == vocab.EOS:
            stop = "eos"
            break
        generated.append(tok)
        stats.decode_tokens += 1
        if tok == vocab.TERM:
            stop = "term"
            break
        state = advance_forcing(state, tok)
        last_row = _submit_one(engine, cache, tok, len(cache))
        stats.decode_passes += 1
    stats.wall_s = time.perf_counter() - t0
    try:
        skeleton = parse_skeleton(generated)
    except NoMarkFoundError as exc:
        err = NoMarkFoundError(str(exc))
        err.tokens = generated
        err.stats = stats
        err.stop_reason = stop
        err.last_logits = last_row
        raise err from None
    if stop == "cap":
        raise SkeletonCapExceededError(
            f"skeleton cap {config.max_skeleton_tokens} hit in a later block"
        )
    return skeleton, generated, stats


def _plain_decode(engine: ForwardEngine, config: DecodeConfig, cache: SequenceCache,
                  first_row: np.ndarray, already: int, stats: StageStats) -> list[int]:
    """Greedy causal decoding until EOS or the plain cap (cap stop, no error)."""
    out: list[int] = []
    last_row = first_row
    while already + len(out) < config.plain_cap:
        tok = greedy_pick(last_row)
        if tok == vocab.EOS:
            break
        out.append(tok)
        stats.decode_tokens += 1
        last_row = _submit_one(engine, cache, tok, len(cache))
        stats.decode_passes += 1
    return out


def _fallback_continue(engine: ForwardEngine, config: DecodeConfig,
                       cache: SequenceCache, trace: "DecodeTrace",
                       exc: NoMarkFoundError, already: int) -> list[int]:
    """Resume plain decoding after a markerless stage 1.

    Nothing to resume after an EOS stop. After a terminator stop the final
    generated token was never submitted, so it is encoded first; after a
    cap stop everything is already in the cache and the exception's logits
    are current.
    """
    if exc.stop_reason == "eos" or not exc.tokens:
        return []
    fstats = trace.stage("fallback")
    ts = time.perf_counter()
    if exc.stop_reason == "term":
        last_row = _submit_one(engine, cache, exc.tokens[-1], len(cache))
        fstats.decode_passes += 1
    else:  # cap stop: the last token is already encoded
        last_row = exc.last_logits
    out = _plain_decode(engine, config, cache, last_row, already, fstats)
    fstats.wall_s += time.perf_counter() - ts
    return out


def run_pipeline(engine: ForwardEngine, task: str, config: DecodeConfig | None = None,
                 mode: str = "parallel", *, keep_logits: bool = False):
    """Run a task end to end; returns (final_text, trace).

    ``mode="normal"`` decodes the same prompt plainly (no forcing, no
    parallel stages) as the comparison baseline. ``mode="parallel"`` runs
    the three stages with loop-back on further markers, falling back to
    plain decoding when stage 1 yields no parallel step.
    """
    config = (config or DecodeConfig()).validate()
    prompt = stage1_prompt(task)
    return run_pipeline_tokens(engine, prompt, config, mode, keep_logits=keep_logits)


def run_pipeline_tokens(engine: ForwardEngine, prompt_tokens, config: DecodeConfig,
                        mode: str = "parallel", *, keep_logits: bool = False):
    if mode not in ("normal", "parallel"):
        raise FanoutError(f"unknown mode {mode!r}")
    t0 = time.perf_counter()
    trace = DecodeTrace(mode=mode)
    cache = engine.new_cache()

    if mode == "normal":
        stats = trace.stage("decode")
        ts = time.perf_counter()
        prompt_tokens = list(prompt_tokens)
        logits = _prefill(engine, cache, prompt_tokens,
                          list(range(len(prompt_tokens))))
        stats.prefill_passes += 1
        stats.prefill_tokens += len(prompt_tokens)
        tok0_row = logits[-1]
        first = greedy_pick(tok0_row)
        final: list[int] = []
        if first != vocab.EOS:
            final.append(first)
            stats.decode_tokens += 1
            last_row = _submit_one(engine, cache, first, len(cache))
            stats.decode_passes += 1
            final.extend(_plain_decode(engine, config, cache, last_row, 1, stats))
        stats.wall_s = time.perf_counter() - ts
        trace.final_tokens = final
        trace.final_text = vocab.decode(final)
        trace.wall_s = time.perf_counter() - t0
        return trace.final_text, trace

    final_tokens: list[int] = []
    try:
        skeleton, generated, s1 = run_stage1(engine, prompt_tokens, config, cache)
        trace.stage("stage1").merge(s1)
        trace.skeletons.append(skeleton.to_json())
    except NoMarkFoundError as exc:
        trace.stage("stage1").merge(exc.stats)
        trace.events.append(f"fallback: {exc}")
        final_tokens = list(exc.tokens)
        final_tokens.extend(
            _fallback_continue(engine, config, cache, trace, exc, len(final_tokens)))
        trace.final_tokens = final_tokens
        trace.final_text = vocab.decode(final_tokens)
        trace.wall_s = time.perf_counter() - t0
        return trace.final_text, trace

    final_tokens.extend(skeleton.preamble)
    prefix_len = len(prompt_tokens) + len(skeleton.preamble)

    while True:
        trace.block_count += 1
        if trace.block_count > MAX_BLOCKS:
            raise FanoutError(f"more than {MAX_BLOCKS} parallel blocks; marker loop?")
        cache.truncate(prefix_len)
        block, s2, position_log = run_stage2(engine, skeleton, config, cache,
                                             keep_logits=keep_logits)
        trace.stage("stage2").merge(s2)
        trace.stage2_step_positions.append(position_log)
        if any(st.reason == "cap" for st in block.states):
            trace.events.append(f"block {trace.block_count}: branch step cap hit")

        cont, reason, s3 = run_stage3(engine, block, config, cache)
        trace.stage("stage3").merge(s3)
        final_tokens.extend(flatten_block(block))
        final_tokens.extend(cont)
        if reason == "eos":
            break
        # reason == "mark": the next block's stage 1 starts at this marker
        prefix_len = len(cache)
        try:
            skeleton, generated, s1 = _stage1_continue(engine, config, cache)
            trace.stage("stage1").merge(s1)
            trace.skeletons.append(skeleton.to_json())
        except NoMarkFoundError as exc:
            # degenerate later block: keep its tokens and finish plainly
            trace.stage("stage1").merge(exc.stats)
            trace.events.append(f"fallback in block {trace.block_count + 1}: {exc}")
            final_tokens.extend(exc.tokens)
            final_tokens.extend(
                _fallback_continue(engine, config, cache, trace, exc,
                                   len(final_tokens)))
            break

    trace.final_tokens = final_tokens
    trace.final_text = vocab.decode(final_tokens)
    trace.wall_s = time.perf_counter() - t0
    return trace.final_text, trace
