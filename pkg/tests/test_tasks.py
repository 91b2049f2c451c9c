import re

import pytest

from fanout import vocab
from fanout.errors import InvalidTaskError, ScriptUndefinedError
from fanout.pipeline import DecodeConfig, run_pipeline_tokens
from fanout.tasks import (BlockPlan, TaskScript, gen_multidoc_task,
                          gen_planning_task, gen_random_plan, gen_retrieval_task,
                          gen_single_branch_task, gen_two_block_task, make_suite,
                          suite_defaults)


def scan_retrieval_answer(task_text: str) -> str:
    """Independent oracle: linear scan of the rendered records."""
    m = re.search(r"between (\d+\.\d+) and (\d+\.\d+)", task_text)
    lo, hi = float(m.group(1)), float(m.group(2))
    hits = [
        (name, float(gpa))
        for name, gpa in re.findall(
            r"The student named (\w+) has a GPA of (\d+\.\d+)", task_text)
        if lo <= float(gpa) <= hi
    ]
    assert len(hits) == 1
    return hits[0][0]


def test_retrieval_ten_branches_one_answer():
    plan = gen_retrieval_task(10, seed=7)
    assert plan.n_branches == 10
    assert plan.expected_answer == scan_retrieval_answer(plan.task_text)
    in_range = [b for b in plan.blocks[0].bodies
                if "in range" in vocab.decode(b)
                and "not in range" not in vocab.decode(b)]
    assert len(in_range) == 1


def test_retrieval_answer_matches_scan_across_seeds():
    for seed in range(40):
        plan = gen_retrieval_task(10, seed=1100 + seed)
        assert plan.expected_answer == scan_retrieval_answer(plan.task_text)


def test_retrieval_minimal_and_invalid_n():
    assert gen_retrieval_task(2, seed=0).n_branches == 2
    with pytest.raises(InvalidTaskError):
        gen_retrieval_task(1, seed=0)
    with pytest.raises(InvalidTaskError):
        gen_retrieval_task(17, seed=0)


def test_multidoc_exactly_one_relevant_branch():
    plan = gen_multidoc_task(10, seed=3)
    city = plan.expected_answer
    holding = [b for b in plan.blocks[0].bodies if city in vocab.decode(b)]
    assert len(holding) == 1
    assert vocab.decode(
        plan.blocks[0].bodies[plan.meta["relevant"]]).count(city) == 1
    # the relevant document in the prompt names the city; decoys use another
    assert plan.task_text.count(f"born in {city}") == 1


def test_planning_k2_has_no_answer_flag():
    plan = gen_planning_task(2, seed=1)
    assert plan.n_branches == 2
    assert plan.expected_answer is None
    assert plan.check_answer("anything") is None


def test_planning_branch_count_distribution():
    ks = [gen_planning_task(None, seed=3300 + i).meta["k"] for i in range(100)]
    assert all(2 <= k <= 10 for k in ks)
    mean = sum(ks) / len(ks)
    assert abs(mean - 4.4) < 0.45


def test_bodies_fit_declared_length_band():
    for seed in (0, 5, 9):
        plan = gen_retrieval_task(10, seed=seed, body_len=(20, 20))
        assert all(len(b) == 20 for b in plan.blocks[0].bodies)
        plan = gen_retrieval_task(10, seed=seed, body_len=(15, 25))
        assert all(15 <= len(b) <= 25 for b in plan.blocks[0].bodies)


def test_titles_prefix_free_enforced():
    with pytest.raises(InvalidTaskError):
        TaskScript(name="bad", task_text="t",
                   preamble=vocab.encode("p"),
                   blocks=[BlockPlan([vocab.encode("Ann"), vocab.encode("Anna")],
                                     [[120], [121]])])


def test_plan_validations():
    with pytest.raises(InvalidTaskError):
        TaskScript(name="bad", task_text="t", preamble=[112],
                   blocks=[BlockPlan([vocab.encode("A:")], [[120]])])
    with pytest.raises(InvalidTaskError):
        TaskScript(name="bad", task_text="t", preamble=[112],
                   blocks=[BlockPlan([vocab.encode("A")], [[vocab.MARK]])])
    with pytest.raises(InvalidTaskError):
        TaskScript(name="bad", task_text="t", preamble=[112],
                   blocks=[BlockPlan([vocab.encode(str(i)) for i in range(17)],
                                     [[120]] * 17)])


def test_script_undefined_off_plan():
    plan = gen_retrieval_task(3, seed=0)
    with pytest.raises(ScriptUndefinedError):
        plan.continuation(vocab.encode("something entirely different"))


def test_single_branch_and_two_block_helpers():
    single = gen_single_branch_task(seed=0)
    assert single.n_branches == 1
    twob = gen_two_block_task(seed=0)
    assert len(twob.blocks) == 2
    assert len(twob.inter_texts) == 1


def test_mode_equivalence_across_generators():
    config = DecodeConfig()
    plans = [gen_retrieval_task(5, 1), gen_multidoc_task(4, 2),
             gen_planning_task(3, 3), gen_single_branch_task(4),
             gen_two_block_task(5)]
    for plan in plans:
        para, _ = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                      config, "parallel")
        norm, _ = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                      config, "normal")
        assert para == norm == plan.full_answer_text(), plan.name


def test_random_plans_run_both_modes():
    config = DecodeConfig()
    for seed in range(25):
        plan = gen_random_plan(seed)
        para, _ = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                      config, "parallel")
        norm, _ = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                      config, "normal")
        assert para == norm == plan.full_answer_text(), plan.name


def test_suite_defaults_shipped():
    defaults = suite_defaults()
    assert set(defaults) == {"retrieval", "multidoc", "planning"}
    assert all(v["count"] == 100 for v in defaults.values())
    tasks = make_suite("retrieval", count=3)
    assert len(tasks) == 3 and tasks[0].meta["suite"] == "retrieval"
    with pytest.raises(InvalidTaskError):
        make_suite("nope")


def test_plans_fit_default_caps():
    cfg = DecodeConfig()
    for suite in ("retrieval", "multidoc", "planning"):
        for plan in make_suite(suite, count=5):
            assert plan.fits(cfg.max_steps_per_branch, cfg.max_skeleton_tokens,
                             cfg.max_continuation_tokens)
