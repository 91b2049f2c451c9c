"""Acceptance criteria, one test per criterion, each printing a verdict line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines
as they happen; the full-suite bench (criteria 3, 5, 6) runs once and is
shared.
"""

import time

import pytest

from fanout import vocab
from fanout.bench import bench_suites, run_bench
from fanout.oracles import (check_equivalence, check_grammar, check_kv_reuse,
                            check_mask)
from fanout.pipeline import DecodeConfig, run_pipeline_tokens
from fanout.tasks import gen_two_block_task, make_suite


def _verdict(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num} ({name}): {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


@pytest.fixture(scope="module")
def full_report():
    # shipped defaults: 100 retrieval + 100 multidoc + 100 planning, both modes
    return bench_suites(["retrieval", "multidoc", "planning"])


def test_criterion_1_branch_isolation_equivalence():
    t0 = time.perf_counter()
    result = check_equivalence(trials=50, seed=20240501, tol=1e-4)
    elapsed = time.perf_counter() - t0
    ok = result.passed and elapsed < 120.0
    _verdict(1, "branch isolation", ok,
             f"50 random configs, {result.details}, {elapsed:.1f}s "
             f"(budget 120s); failures: {result.failures[:2]}")


def test_criterion_2_mask_oracle():
    result = check_mask(trials=1000, seed=7)
    _verdict(2, "mask oracle", result.passed,
             f"1000 random layouts + 200 single-branch collapses, "
             f"{result.details}; failures: {result.failures[:2]}")


def test_criterion_3_position_law(full_report):
    violations = full_report["aggregates"]["position_law_violations"]
    rows = [r for r in full_report["rows"]
            if r["mode"] == "parallel" and r["error"] is None]
    _verdict(3, "position law", violations == 0,
             f"{violations} violations across {len(rows)} parallel runs "
             f"(300-task suite)")


def test_criterion_4_kv_reuse_bitwise():
    result = check_kv_reuse(runs=100, seed=11)
    _verdict(4, "KV reuse", result.passed,
             f"100 runs, {result.details}; failures: {result.failures[:2]}")


def test_criterion_5_throughput(full_report):
    retrieval = [t for t in full_report["tasks"] if t["suite"] == "retrieval"]
    within = all(t["within_5pct"] for t in retrieval)
    mean = sum(t["speedup"] for t in retrieval) / len(retrieval)
    equal_report = run_bench(make_suite("retrieval", count=30,
                                        body_len=(20, 20)))
    eq_tasks = equal_report["tasks"]
    eq_within = all(t["within_5pct"] for t in eq_tasks)
    eq_mean = sum(t["speedup"] for t in eq_tasks) / len(eq_tasks)
    ok = within and mean >= 1.5 and eq_within and eq_mean >= 1.9
    _verdict(5, "throughput", ok,
             f"retrieval n=10 bodies 20±5: mean speedup {mean:.3f} (>=1.5), "
             f"all within ±5% of analytic: {within}; equal bodies: "
             f"{eq_mean:.3f} (>=1.9), within ±5%: {eq_within}")


def test_criterion_6_retrieval_accuracy(full_report):
    modes = full_report["aggregates"]["by_suite"]["retrieval"]["modes"]
    acc_p = modes["parallel"]["accuracy"]
    acc_n = modes["normal"]["accuracy"]
    _verdict(6, "retrieval accuracy", acc_p == 1.0 and acc_n == 1.0,
             f"parallel {acc_p:.2f}, normal {acc_n:.2f} over 100 tasks "
             f"(required 1.00 both)")


def test_criterion_7_grammar_under_forcing():
    result = check_grammar(runs=1000, seed=3)
    _verdict(7, "stage-1 grammar", result.passed,
             f"1000 randomized scripted runs, zero malformed skeletons, "
             f"forcing postconditions hold ({result.details}); "
             f"failures: {result.failures[:2]}")


def test_criterion_8_two_block_loopback():
    plan = gen_two_block_task(seed=2)
    text, trace = run_pipeline_tokens(plan.engine(), plan.prompt_tokens,
                                      DecodeConfig(), "parallel")
    well_formed = (text == plan.full_answer_text()
                   and vocab.decode(vocab.encode(text)) == text)
    ok = trace.block_count == 2 and well_formed
    _verdict(8, "loop-back", ok,
             f"block count {trace.block_count} (need 2), final text matches "
             f"the sequential answer: {well_formed}")
