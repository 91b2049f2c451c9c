"""Independent oracles for the mask, branch isolation, positions and KV reuse.

Each check here is deliberately written against the *rules*, not against
the implementation it verifies: the mask oracle re-derives visibility from
(segment kind, branch, index) pairs pair by pair; the isolation oracle
decodes one branch at a time with plain everything-visible masks and
matched positions; the grammar scan re-walks transcripts with its own
little state tracker. Production code paths must agree with them exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .engine import ForwardRequest, greedy_pick
from .errors import ContinuationCapExceededError, MalformedBranchError, NoMarkFoundError
from .grammar import Skeleton
from .layout import Kind, SequenceLayout, build_layout, tree_mask
from .model import ModelConfig, init_model
from .pipeline import DecodeConfig, run_stage1, run_stage2, run_stage3
from .tasks import gen_random_plan


@dataclass
class OracleResult:
    name: str
    passed: bool
    trials: int
    details: str = ""
    elapsed_s: float = 0.0
    failures: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"name": self.name, "passed": self.passed, "trials": self.trials,
                "details": self.details, "elapsed_s": self.elapsed_s,
                "failures": self.failures[:10]}


# -- mask oracle -----------------------------------------------------------

def brute_force_visible(layout: SequenceLayout) -> list[set[int]]:
    """Re-derive the visibility law pair by pair from segment kinds only."""
    entries = layout.entries
    out = []
    for q in range(len(entries)):
        eq = entries[q]
        vis = {q}
        for k in range(q):
            ek = entries[k]
            if ek.kind is Kind.PAD:
                continue
            if eq.kind is Kind.PREFIX:
                ok = ek.kind is Kind.PREFIX
            elif eq.kind in (Kind.TITLE, Kind.BODY):
                ok = ek.kind is Kind.PREFIX or (
                    ek.kind in (Kind.TITLE, Kind.BODY) and ek.branch == eq.branch)
            elif eq.kind is Kind.PAD:
                ok = False
            else:  # CONT
                ok = ek.kind in (Kind.PREFIX, Kind.TITLE, Kind.BODY, Kind.CONT)
            if ok:
                vis.add(k)
        out.append(vis)
    return out


def random_layout(rng: np.random.Generator) -> SequenceLayout:
    prefix = int(rng.integers(0, 7))
    n = int(rng.integers(1, 6))
    layout = build_layout(prefix, [int(rng.integers(1, 5)) for _ in range(n)])
    steps = int(rng.integers(0, 9))
    stop_at = [int(rng.integers(0, steps + 1)) if rng.random() < 0.6 else steps
               for _ in range(n)]
    for step in range(steps):
        layout.append_step([step < stop_at[b] for b in range(n)])
    if rng.random() < 0.4:
        if rng.random() < 0.5:
            layout.truncate_to_prefix()
        layout.append_continuation(int(rng.integers(1, 6)))
    return layout


def check_mask(trials: int = 1000, seed: int = 0) -> OracleResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = []
    for trial in range(trials):
        layout = random_layout(rng)
        mask = tree_mask(layout)
        expected = brute_force_visible(layout)
        for q in range(len(layout)):
            if mask.visible(q) != expected[q]:
                failures.append(f"trial {trial}: query {q} "
                                f"{sorted(mask.visible(q))} != {sorted(expected[q])}")
                break
    # single-branch collapse: index-exact causal mask
    for trial in range(200):
        layout = build_layout(int(rng.integers(0, 6)), [int(rng.integers(1, 6))])
        for _ in range(int(rng.integers(0, 7))):
            layout.append_step([True])
        layout.append_continuation(int(rng.integers(0, 4)))
        mask = tree_mask(layout)
        for q in range(len(layout)):
            if mask.visible(q) != set(range(q + 1)):
                failures.append(f"collapse trial {trial}: query {q} not causal")
                break
    elapsed = time.perf_counter() - t0
    return OracleResult("mask", not failures, trials + 200,
                        f"{len(failures)} mismatches", elapsed, failures)


# -- branch-isolation oracle ------------------------------------------------

def isolated_branch_decode(engine, prefix_tokens, title_tokens, first_body_pos: int,
                           max_steps: int):
    """Reference decode of one branch alone, with matched position ids.

    Fresh cache; prefix and title prefilled causally (title positions
    continue from the prefix); then the step loop submits the title's last
    token at ``first_body_pos`` and each emitted token afterwards, all
    masks plain everything-visible. Returns (body, per-step logits).
    """
    cache = engine.new_cache()
    tokens = list(prefix_tokens) + list(title_tokens)
    positions = list(range(len(tokens)))
    engine.forward(ForwardRequest(
        tokens, positions,
        [range(0, i + 1) for i in range(len(tokens))], cache))
    body: list[int] = []
    logits_log: list[np.ndarray] = []
    tok = title_tokens[-1]
    pos = first_body_pos
    for _ in range(max_steps):
        row = engine.forward(ForwardRequest(
            [tok], [pos], [range(0, len(cache) + 1)], cache))[0]
        logits_log.append(row)
        nxt = greedy_pick(row)
        if nxt == vocab.MARK or nxt == vocab.TERM:
            break
        body.append(nxt)
        tok = nxt
        pos += 1
    return body, logits_log


def random_model_config(rng: np.random.Generator) -> ModelConfig:
    n_heads = int(rng.choice([1, 2, 4]))
    head_dim = int(rng.choice([2, 4, 8, 16]))
    return ModelConfig(
        n_layers=int(rng.integers(1, 5)),
        n_heads=n_heads,
        head_dim=head_dim,
        hidden_dim=n_heads * head_dim,
        vocab_size=vocab.VOCAB_SIZE,
        rope_theta=10000.0,
        seed=int(rng.integers(0, 2**31)),
    )


def check_equivalence(trials: int = 50, seed: int = 0, tol: float = 1e-4) -> OracleResult:
    """Stage-2 parallel bodies vs isolated per-branch decodes on tiny models."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = []
    max_diff = 0.0
    for trial in range(trials):
        config = random_model_config(rng)
        engine = init_model(config)
        prefix_len = int(rng.integers(0, 11))
        prefix = [int(t) for t in rng.integers(0, 256, prefix_len)]
        n = int(rng.integers(1, 9))
        titles = [[int(t) for t in rng.integers(0, 256, int(rng.integers(1, 7)))]
                  for _ in range(n)]
        max_steps = int(rng.integers(1, 33))
        decode_cfg = DecodeConfig(max_steps_per_branch=max_steps)

        cache = engine.new_cache()
        if prefix:
            engine.forward(ForwardRequest(
                prefix, list(range(prefix_len)),
                [range(0, i + 1) for i in range(prefix_len)], cache))
        skeleton = Skeleton([], titles, 0, True)
        block, _, _ = run_stage2(engine, skeleton, decode_cfg, cache,
                                 keep_logits=True)
        first_body_pos = prefix_len + max(len(t) for t in titles)
        for b in range(n):
            body_ref, logits_ref = isolated_branch_decode(
                engine, prefix, titles[b], first_body_pos, max_steps)
            if block.bodies[b] != body_ref:
                failures.append(
                    f"trial {trial} branch {b}: bodies differ "
                    f"{block.bodies[b][:8]} vs {body_ref[:8]}")
                continue
            for step, (lp, lr) in enumerate(zip(block.step_logits[b], logits_ref)):
                diff = float(np.max(np.abs(lp - lr)))
                max_diff = max(max_diff, diff)
                if diff > tol:
                    failures.append(
                        f"trial {trial} branch {b} step {step}: logit diff {diff}")
                    break
    elapsed = time.perf_counter() - t0
    return OracleResult("equivalence", not failures, trials,
                        f"max logit diff {max_diff:.3e}", elapsed, failures)


# -- KV reuse ----------------------------------------------------------------

def _random_skeleton_tokens(rng: np.random.Generator):
    preamble = [int(t) for t in rng.integers(97, 123, int(rng.integers(1, 7)))]
    out = list(preamble)
    for _ in range(int(rng.integers(1, 5))):
        out.append(vocab.MARK)
        out.extend(int(t) for t in rng.integers(97, 123, int(rng.integers(1, 5))))
        out.append(vocab.COLON)
        out.append(vocab.ELLIPSIS)
    out.extend((vocab.MARK, vocab.TERM))
    return out


def _caches_equal(snap_a, snap_b) -> bool:
    layers_a, pos_a = snap_a
    layers_b, pos_b = snap_b
    if not np.array_equal(pos_a, pos_b):
        return False
    return all(np.array_equal(ka, kb) and np.array_equal(va, vb)
               for (ka, va), (kb, vb) in zip(layers_a, layers_b))


def check_kv_reuse(runs: int = 100, seed: int = 0) -> OracleResult:
    """Prefix cache entries must stay bitwise identical across all stages."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = []
    for run in range(runs):
        config = random_model_config(rng)
        engine = init_model(config)
        prompt = [int(t) for t in rng.integers(0, 256, int(rng.integers(4, 13)))]
        teacher = _random_skeleton_tokens(rng)
        decode_cfg = DecodeConfig(max_steps_per_branch=int(rng.integers(1, 7)),
                                  max_continuation_tokens=int(rng.integers(2, 7)))
        cache = engine.new_cache()
        skeleton, _, _ = run_stage1(engine, prompt, decode_cfg, cache,
                                    teacher_tokens=teacher)
        prefix_len = len(prompt) + len(skeleton.preamble)
        baseline = cache.snapshot(prefix_len)
        cache.truncate(prefix_len)
        block, _, _ = run_stage2(engine, skeleton, decode_cfg, cache)
        if not _caches_equal(baseline, cache.snapshot(prefix_len)):
            failures.append(f"run {run}: prefix changed during stage 2")
            continue
        try:
            run_stage3(engine, block, decode_cfg, cache)
        except ContinuationCapExceededError:
            pass  # random weights rarely emit EOS; the cap stop is expected
        if not _caches_equal(baseline, cache.snapshot(prefix_len)):
            failures.append(f"run {run}: prefix changed during stage 3")
    elapsed = time.perf_counter() - t0
    return OracleResult("kv-reuse", not failures, runs,
                        f"{len(failures)} unstable prefixes", elapsed, failures)


# -- grammar under forcing ----------------------------------------------------

def scan_forcing_postconditions(generated) -> list[str]:
    """Independent walk: ellipsis must follow a title colon, a marker or the
    terminator must follow an ellipsis."""
    problems = []
    in_title = False
    for i, tok in enumerate(generated[:-1]):
        nxt = generated[i + 1]
        if tok == vocab.MARK:
            in_title = True
        elif tok in (vocab.TERM, vocab.ELLIPSIS):
            in_title = False
        if tok == vocab.COLON and in_title:
            in_title = False
            if nxt != vocab.ELLIPSIS:
                problems.append(f"token {i}: colon not followed by ellipsis")
        elif tok == vocab.ELLIPSIS and nxt not in (vocab.MARK, vocab.TERM):
            problems.append(f"token {i}: ellipsis not followed by marker/terminator")
    return problems


def check_grammar(runs: int = 1000, seed: int = 0) -> OracleResult:
    t0 = time.perf_counter()
    failures = []
    fallbacks = 0
    for i in range(runs):
        plan = gen_random_plan(seed * 100003 + i)
        engine = plan.engine()
        cache = engine.new_cache()
        try:
            skeleton, generated, _ = run_stage1(
                engine, plan.prompt_tokens, DecodeConfig(), cache)
        except NoMarkFoundError:
            fallbacks += 1
            if plan.blocks:
                failures.append(f"run {i}: spurious no-mark fallback")
            continue
        except MalformedBranchError as exc:
            failures.append(f"run {i}: malformed skeleton: {exc}")
            continue
        if not plan.blocks:
            failures.append(f"run {i}: plain plan produced a skeleton")
            continue
        if skeleton.titles != plan.blocks[0].titles:
            failures.append(f"run {i}: parsed titles differ from the plan")
        problems = scan_forcing_postconditions(generated)
        if problems:
            failures.append(f"run {i}: {problems[0]}")
    elapsed = time.perf_counter() - t0
    return OracleResult("grammar", not failures, runs,
                        f"{fallbacks} clean fallbacks", elapsed, failures)


# -- runner -------------------------------------------------------------------

CHECKS = {
    "mask": check_mask,
    "equivalence": check_equivalence,
    "kv-reuse": check_kv_reuse,
    "grammar": check_grammar,
}


def run_oracles(names=None, seed: int = 0, trials: dict | None = None) -> list[OracleResult]:
    names = list(CHECKS) if not names or names == ["all"] else list(names)
    trials = trials or {}
    results = []
    for name in names:
        if name not in CHECKS:
            raise KeyError(f"unknown oracle {name!r}; choose from {sorted(CHECKS)}")
        kwargs = {"seed": seed}
        if name in trials:
            arg = "runs" if name in ("kv-reuse", "grammar") else "trials"
            kwargs[arg] = trials[name]
        results.append(CHECKS[name](**kwargs))
    return results
