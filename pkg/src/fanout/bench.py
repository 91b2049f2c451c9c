"""Benchmark runner: each task in both modes, throughput accounting, report.

Speed is reported as content tokens per decode pass (hardware-independent)
next to wall time. Plain causal decoding scores exactly 1.0 by construction
(the token read off the prompt prefill offsets the pass that only finds
EOS), so a task's speedup ratio equals the parallel mode's tokens-per-pass.
The analytic ratio is computed from the task plan alone - token counts,
never a pipeline run - and the measured ratio is expected to land within
5% of it.
"""

from __future__ import annotations

import copy
import json

from .errors import FanoutError
from .pipeline import DecodeConfig, run_pipeline_tokens
from .tasks import TaskScript, make_suite


def analytic_speedup(plan: TaskScript) -> float:
    """Tokens-per-pass ratio predicted from the plan's token counts.

    Per block: stage 1 emits S skeleton tokens in S-1 passes (the first
    token rides the preceding prefill), stage 2 emits sum(|body|) tokens in
    1+max(|body|) passes, stage 3 emits its continuation 1:1. Normal mode
    is exactly 1.0.
    """
    if not plan.blocks:
        return 1.0
    c = plan.stage_counts()
    tokens = (sum(c["skeleton"]) + sum(sum(b) for b in c["bodies"])
              + sum(c["continuations"]))
    passes = (sum(s - 1 for s in c["skeleton"])
              + sum(1 + max(b) for b in c["bodies"])
              + sum(c["continuations"]))
    return tokens / passes


def step_position_violations(stage2_step_positions) -> int:
    """Count rows breaking the shared-position law or the +1 step law."""
    bad = 0
    for block in stage2_step_positions:
        prev = None
        for step_rows in block:
            first = step_rows[0]
            bad += sum(1 for p in step_rows if p != first)
            if prev is not None and first != prev + 1:
                bad += 1
            prev = first
    return bad


def _mode_row(plan: TaskScript, mode: str, config: DecodeConfig) -> dict:
    row = {"mode": mode, "error": None, "answer": None, "correct": None}
    try:
        final_text, trace = run_pipeline_tokens(
            plan.engine(), plan.prompt_tokens, config, mode)
    except FanoutError as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    row.update({
        "decode_tokens": trace.decode_tokens,
        "decode_passes": trace.decode_passes,
        "prefill_passes": trace.prefill_passes,
        "prefill_tokens": trace.prefill_tokens,
        "tokens_per_pass": trace.tokens_per_pass,
        "wall_s": trace.wall_s,
        "block_count": trace.block_count,
        "final_text_len": len(final_text),
        "position_violations": step_position_violations(trace.stage2_step_positions),
    })
    correct = plan.check_answer(final_text)
    if correct is not None:
        row["answer"] = plan.expected_answer
        row["correct"] = correct
    return row


def run_bench(tasks: list[TaskScript], config: DecodeConfig | None = None) -> dict:
    """Run every task in parallel and normal mode; never aborts the suite."""
    config = (config or DecodeConfig()).validate()
    rows = []
    task_summaries = []
    for plan in tasks:
        parallel = _mode_row(plan, "parallel", config)
        normal = _mode_row(plan, "normal", config)
        for r in (parallel, normal):
            r.update({"task": plan.name, "suite": plan.meta.get("suite", "?"),
                      "seed": plan.meta.get("seed")})
            rows.append(r)
        summary = {"task": plan.name, "suite": plan.meta.get("suite", "?"),
                   "analytic_speedup": analytic_speedup(plan),
                   "speedup": None, "within_5pct": None}
        if parallel["error"] is None and normal["error"] is None:
            summary["speedup"] = (parallel["tokens_per_pass"]
                                  / normal["tokens_per_pass"])
            summary["within_5pct"] = (
                abs(summary["speedup"] - summary["analytic_speedup"])
                <= 0.05 * summary["analytic_speedup"])
        task_summaries.append(summary)
    return {
        "meta": {
            "task_count": len(tasks),
            "config": {
                "max_skeleton_tokens": config.max_skeleton_tokens,
                "max_steps_per_branch": config.max_steps_per_branch,
                "max_continuation_tokens": config.max_continuation_tokens,
            },
        },
        "rows": rows,
        "tasks": task_summaries,
        "aggregates": _aggregate(rows, task_summaries),
    }


def _aggregate(rows, task_summaries) -> dict:
    suites = sorted({r["suite"] for r in rows})
    by_suite = {}
    for suite in suites:
        srows = [r for r in rows if r["suite"] == suite and r["error"] is None]
        ssums = [t for t in task_summaries if t["suite"] == suite
                 and t["speedup"] is not None]
        entry = {"modes": {}}
        for mode in ("parallel", "normal"):
            mrows = [r for r in srows if r["mode"] == mode]
            if not mrows:
                continue
            judged = [r for r in mrows if r["correct"] is not None]
            entry["modes"][mode] = {
                "count": len(mrows),
                "mean_tokens_per_pass": sum(r["tokens_per_pass"] for r in mrows)
                / len(mrows),
                "mean_wall_s": sum(r["wall_s"] for r in mrows) / len(mrows),
                "accuracy": (sum(r["correct"] for r in judged) / len(judged)
                             if judged else None),
            }
        if ssums:
            entry["mean_speedup"] = sum(t["speedup"] for t in ssums) / len(ssums)
            entry["mean_analytic_speedup"] = (
                sum(t["analytic_speedup"] for t in ssums) / len(ssums))
            entry["all_within_5pct"] = all(t["within_5pct"] for t in ssums)
        by_suite[suite] = entry
    return {
        "by_suite": by_suite,
        "position_law_violations": sum(r.get("position_violations", 0) for r in rows),
        "errors": sum(1 for r in rows if r["error"] is not None),
    }


def bench_suites(suites, config: DecodeConfig | None = None, count: int | None = None,
                 base_seed: int | None = None, **overrides) -> dict:
    tasks = []
    for name in suites:
        tasks.extend(make_suite(name, count=count, base_seed=base_seed, **overrides))
    report = run_bench(tasks, config)
    report["meta"]["suites"] = list(suites)
    return report


def report_core(report: dict) -> dict:
    """Report with wall-clock fields removed: byte-identical across runs."""
    core = copy.deepcopy(report)
    for row in core["rows"]:
        row.pop("wall_s", None)
    for suite in core["aggregates"]["by_suite"].values():
        for mode in suite["modes"].values():
            mode.pop("mean_wall_s", None)
    return core


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def render_csv(report: dict) -> str:
    """Aggregate table: one row per (suite, mode), memory column omitted."""
    lines = ["suite,mode,answer_quality,tokens_per_pass,mean_wall_s,mean_speedup"]
    for suite, entry in sorted(report["aggregates"]["by_suite"].items()):
        for mode in ("normal", "parallel"):
            stats = entry["modes"].get(mode)
            if stats is None:
                continue
            acc = "" if stats["accuracy"] is None else f"{stats['accuracy']:.2f}"
            speedup = ""
            if mode == "parallel" and "mean_speedup" in entry:
                speedup = f"{entry['mean_speedup']:.3f}"
            lines.append(
                f"{suite},{mode},{acc},{stats['mean_tokens_per_pass']:.3f},"
                f"{stats['mean_wall_s']:.4f},{speedup}")
    return "\n".join(lines) + "\n"
