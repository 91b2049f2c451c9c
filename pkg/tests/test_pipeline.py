import numpy as np
import pytest

from fanout import vocab
from fanout.engine import ForwardRequest
from fanout.errors import (ContinuationCapExceededError, NoMarkFoundError,
                           SkeletonCapExceededError)
from fanout.grammar import Skeleton
from fanout.model import ModelConfig, init_model
from fanout.oracles import isolated_branch_decode, scan_forcing_postconditions
from fanout.pipeline import (DecodeConfig, flatten_block, run_pipeline,
                             run_pipeline_tokens, run_stage1, run_stage2, run_stage3)
from fanout.tasks import (BlockPlan, TaskScript, gen_random_plan,
                          gen_retrieval_task, gen_two_block_task)

CFG = DecodeConfig()


def make_plan(titles, bodies, preamble="start here.", conclusion="\ndone."):
    return TaskScript(
        name="manual", task_text="do the thing",
        preamble=vocab.encode(preamble),
        blocks=[BlockPlan([vocab.encode(t) for t in titles],
                          [vocab.encode(b) for b in bodies])],
        conclusion=vocab.encode(conclusion),
    )


def test_stage1_parses_scripted_ten_branch_skeleton():
    plan = gen_retrieval_task(10, seed=5)
    engine = plan.engine()
    cache = engine.new_cache()
    skeleton, generated, stats = run_stage1(engine, plan.prompt_tokens, CFG, cache)
    assert skeleton.n == 10
    assert skeleton.titles == plan.blocks[0].titles
    assert skeleton.terminated
    assert stats.decode_passes == stats.decode_tokens - 1
    # cache holds prompt + all generated tokens except the final terminator
    assert len(cache) == len(plan.prompt_tokens) + len(generated) - 1


def test_stage1_no_marker_fallback_path():
    plan = gen_random_plan(seed=1, allow_plain=True)
    while plan.blocks:
        plan = gen_random_plan(seed=np.random.default_rng(plan.meta["seed"] + 1)
                               .integers(1 << 30), allow_plain=True)
    engine = plan.engine()
    with pytest.raises(NoMarkFoundError) as err:
        run_stage1(engine, plan.prompt_tokens, CFG, engine.new_cache())
    assert err.value.tokens  # enriched for the fallback path


def test_stage1_forcing_postconditions_on_transcripts():
    for seed in range(30):
        plan = gen_random_plan(seed=seed, allow_plain=False)
        engine = plan.engine()
        try:
            _, generated, _ = run_stage1(engine, plan.prompt_tokens, CFG,
                                         engine.new_cache())
        except NoMarkFoundError:
            continue
        assert scan_forcing_postconditions(generated) == []


def test_stage1_cap_with_markers_raises():
    # preamble 4 tokens + (marker, 2-token title, colon, ellipsis) = 9: the cap
    # cuts right after the first complete group, so markers exist but no
    # terminator was reached
    plan = make_plan(["AB", "CD"], ["x", "y"], preamble="pre.")
    engine = plan.engine()
    with pytest.raises(SkeletonCapExceededError):
        run_stage1(engine, plan.prompt_tokens,
                   DecodeConfig(max_skeleton_tokens=9), engine.new_cache())


def stage2_on_prefilled(plan, engine=None, keep_logits=False,
                        config=CFG):
    engine = engine or plan.engine()
    cache = engine.new_cache()
    prefix = plan.prompt_tokens + plan.preamble
    engine.forward(ForwardRequest(
        prefix, list(range(len(prefix))),
        [range(0, i + 1) for i in range(len(prefix))], cache))
    skeleton = Skeleton(plan.preamble, plan.blocks[0].titles, 0, True)
    block, stats, log = run_stage2(engine, skeleton, config, cache,
                                   keep_logits=keep_logits)
    return engine, cache, block, stats, log


def test_stage2_equal_bodies_pass_and_token_counts():
    # four branches, bodies exactly 25 tokens: 26 decode passes, 100 new tokens
    bodies = ["b" * 25, "c" * 25, "d" * 25, "e" * 25]
    plan = make_plan(["Alpha", "Beta", "Gamma", "Delta"], bodies)
    _, _, block, stats, _ = stage2_on_prefilled(plan)
    assert stats.decode_passes == 26
    assert stats.decode_tokens == 100
    assert [len(b) for b in block.bodies] == [25, 25, 25, 25]
    assert all(st.reason == "mark" for st in block.states)


def test_stage2_single_branch_matches_isolated_decode():
    plan = make_plan(["Only"], ["the single body"])
    engine, _, block, _, _ = stage2_on_prefilled(plan)
    prefix = plan.prompt_tokens + plan.preamble
    body_ref, _ = isolated_branch_decode(
        engine, prefix, plan.blocks[0].titles[0],
        len(prefix) + len(plan.blocks[0].titles[0]), CFG.max_steps_per_branch)
    assert block.bodies[0] == body_ref == plan.blocks[0].bodies[0]


def test_stage2_shared_positions_per_step():
    plan = make_plan(["Aa", "Bbbb", "C"], ["one", "two two", ""])
    _, _, block, _, log = stage2_on_prefilled(plan)
    base = block.layout.block_start + block.layout.max_title_len
    for step, positions in enumerate(log):
        assert len(set(positions)) == 1
        assert positions[0] == base + step


def test_stage2_zero_length_body_is_legal():
    plan = make_plan(["Empty", "Full"], ["", "some body text"])
    _, _, block, _, _ = stage2_on_prefilled(plan)
    assert block.bodies[0] == []
    assert block.states[0].terminated_at == 0
    assert vocab.decode(block.bodies[1]) == "some body text"


def test_stage2_cap_marks_branch_terminated():
    plan = make_plan(["Longer"], ["x" * 40])
    _, _, block, stats, _ = stage2_on_prefilled(
        plan, config=DecodeConfig(max_steps_per_branch=8))
    assert block.states[0].reason == "cap"
    assert block.states[0].terminated_at == 8
    assert len(block.bodies[0]) == 8
    assert stats.decode_passes == 8


def test_stage2_transformer_isolation_smoke():
    engine = init_model(ModelConfig(n_layers=2, n_heads=2, head_dim=4,
                                    hidden_dim=8, seed=9))
    cache = engine.new_cache()
    prefix = [10, 20, 30]
    engine.forward(ForwardRequest(prefix, [0, 1, 2],
                                  [range(0, i + 1) for i in range(3)], cache))
    titles = [[65, 66], [67], [68, 69, 70]]
    config = DecodeConfig(max_steps_per_branch=6)
    block, _, _ = run_stage2(engine, Skeleton([], titles, 0, True), config, cache,
                             keep_logits=True)
    first_pos = 3 + 3
    for b, title in enumerate(titles):
        body_ref, logits_ref = isolated_branch_decode(engine, prefix, title,
                                                      first_pos, 6)
        assert block.bodies[b] == body_ref
        for mine, ref in zip(block.step_logits[b], logits_ref):
            assert np.max(np.abs(mine - ref)) <= 1e-4


def test_stage3_flatten_shape_and_continuation():
    plan = make_plan(["One", "Two"], [" body one", " body two"],
                     conclusion="\nthe end.")
    engine, cache, block, _, _ = stage2_on_prefilled(plan)
    prefix_len = block.layout.block_start
    cont, reason, stats = run_stage3(engine, block, CFG, cache)
    assert reason == "eos"
    assert vocab.decode(cont) == "\nthe end."
    flat = flatten_block(block)
    text = vocab.decode(flat)
    assert text == "####One: body one####Two: body two####%%%%"
    # cache = prefix + flattened block + continuation
    assert len(cache) == prefix_len + len(flat) + len(cont)


def test_stage3_continuation_cap_raises_with_partial():
    plan = make_plan(["One"], [" b"], conclusion="\nlong conclusion text here.")
    engine, cache, block, _, _ = stage2_on_prefilled(plan)
    with pytest.raises(ContinuationCapExceededError) as err:
        run_stage3(engine, block, DecodeConfig(max_continuation_tokens=4), cache)
    assert len(err.value.tokens) == 4


def test_pipeline_mode_equivalence_and_conservation():
    plan = gen_retrieval_task(6, seed=11)
    parallel_text, tp = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                            CFG, "parallel")
    normal_text, tn = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                          CFG, "normal")
    assert parallel_text == normal_text == plan.full_answer_text()
    # token conservation incl. tokenizer round trip
    assert vocab.decode(vocab.encode(parallel_text)) == parallel_text
    assert tp.block_count == 1 and tn.block_count == 0
    assert tp.skeletons and tp.skeletons[0]["n"] == 6


def test_pipeline_order_preservation():
    plan = gen_retrieval_task(5, seed=2)
    text, trace = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                      CFG, "parallel")
    titles = [vocab.decode(t) for t in plan.blocks[0].titles]
    positions = [text.index("####" + t + ":") for t in titles]
    assert positions == sorted(positions)
    assert trace.skeletons[0]["titles"] == titles


def test_pipeline_two_block_loopback():
    plan = gen_two_block_task(seed=4)
    text, trace = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                      CFG, "parallel")
    assert trace.block_count == 2
    assert text == plan.full_answer_text()
    assert text.count("%%%%") == 2
    normal_text, _ = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                         CFG, "normal")
    assert text == normal_text


def test_pipeline_fallback_is_lossless():
    plan = gen_random_plan(seed=42, allow_plain=True)
    while plan.blocks:
        seed = plan.meta["seed"] + 1
        plan = gen_random_plan(seed=seed, allow_plain=True)
    text, trace = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                      CFG, "parallel")
    assert text == plan.full_answer_text()
    assert trace.block_count == 0
    assert any(e.startswith("fallback") for e in trace.events)


def test_fallback_after_cap_keeps_cache_aligned():
    """A markerless engine that never emits EOS: stage 1 caps out, the
    fallback resumes without re-encoding the already-submitted token."""
    from fanout.scripted import ScriptedEngine

    def counter(visible):
        return 97 + (len(visible) % 26)

    engine = ScriptedEngine(counter)
    config = DecodeConfig(max_skeleton_tokens=10, max_steps_per_branch=1,
                          max_continuation_tokens=5)
    prompt = vocab.encode("abc")
    text, trace = run_pipeline_tokens(engine, prompt, config, "parallel")
    expected = [97 + ((len(prompt) + k) % 26) for k in range(config.plain_cap)]
    assert trace.final_tokens == expected
    assert any(e.startswith("fallback") for e in trace.events)


def test_pipeline_run_by_task_text():
    plan = gen_retrieval_task(4, seed=9)
    text, trace = run_pipeline(plan.engine(), plan.task_text, CFG, "parallel")
    assert text == plan.full_answer_text()


def test_pass_accounting_invariant_on_traces():
    for seed in (1, 3, 8):
        plan = gen_retrieval_task(7, seed=seed)
        _, trace = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                       CFG, "parallel")
        bodies = [len(b) for b in plan.blocks[0].bodies]
        assert trace.stages["stage2"].decode_passes == 1 + max(bodies)
        assert trace.stages["stage2"].decode_tokens == sum(bodies)


def test_prefix_kv_bitwise_stability_smoke():
    engine = init_model(ModelConfig(n_layers=2, n_heads=2, head_dim=4,
                                    hidden_dim=8, seed=21))
    cache = engine.new_cache()
    prompt = [int(t) for t in np.random.default_rng(0).integers(0, 256, 8)]
    teacher = (vocab.encode("pre ")
               + [vocab.MARK] + vocab.encode("T1") + [vocab.COLON, vocab.ELLIPSIS]
               + [vocab.MARK] + vocab.encode("T2") + [vocab.COLON, vocab.ELLIPSIS]
               + [vocab.MARK, vocab.TERM])
    config = DecodeConfig(max_steps_per_branch=4, max_continuation_tokens=4)
    skeleton, _, _ = run_stage1(engine, prompt, config, cache,
                                teacher_tokens=teacher)
    prefix_len = len(prompt) + len(skeleton.preamble)
    base_layers, base_pos = cache.snapshot(prefix_len)
    cache.truncate(prefix_len)
    block, _, _ = run_stage2(engine, skeleton, config, cache)
    with pytest.raises(ContinuationCapExceededError):
        run_stage3(engine, block, config, cache)
    now_layers, now_pos = cache.snapshot(prefix_len)
    assert np.array_equal(base_pos, now_pos)
    for (k0, v0), (k1, v1) in zip(base_layers, now_layers):
        assert np.array_equal(k0, k1) and np.array_equal(v0, v1)
