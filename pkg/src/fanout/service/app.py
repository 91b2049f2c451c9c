"""HTTP service wrapping the decoding engine, bench and oracles.

Transformer engines are immutable after init and safe to share, so they are
cached per config; every request decodes over its own fresh cache.
"""

from __future__ import annotations

import threading

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..bench import bench_suites
from ..errors import FanoutError, InvalidTaskError
from ..layout import build_layout, mask_grid
from ..model import ModelConfig, init_model
from ..oracles import run_oracles
from ..pipeline import DecodeConfig, run_pipeline_tokens
from ..tasks import (gen_multidoc_task, gen_planning_task, gen_retrieval_task,
                     gen_single_branch_task, gen_two_block_task)
from .schemas import (BenchRequest, BenchResponse, DumpMaskRequest, DumpMaskResponse,
                      GenerateRequest, GenerateResponse, HealthResponse,
                      OracleRequest, OracleResponse)

app = FastAPI(title="fanout decoding service", version=__version__)

_engines: dict[tuple, object] = {}
_engines_lock = threading.Lock()


def _transformer(config: ModelConfig):
    key = (config.n_layers, config.n_heads, config.head_dim, config.hidden_dim,
           config.vocab_size, config.rope_theta, config.seed)
    with _engines_lock:
        engine = _engines.get(key)
        if engine is None:
            engine = init_model(config)
            _engines[key] = engine
        return engine


def _make_task(suite: str, seed: int, n: int | None):
    if suite == "retrieval":
        return gen_retrieval_task(n or 10, seed)
    if suite == "multidoc":
        return gen_multidoc_task(n or 10, seed)
    if suite == "planning":
        return gen_planning_task(n, seed)
    if suite == "single":
        return gen_single_branch_task(seed)
    return gen_two_block_task(seed)


def _decode_config(caps) -> DecodeConfig:
    if caps is None:
        return DecodeConfig()
    return DecodeConfig(**caps.model_dump())


@app.get("/v1/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/v1/generate", response_model=GenerateResponse)
def generate(req: GenerateRequest) -> GenerateResponse:
    try:
        plan = _make_task(req.suite, req.seed, req.n)
        if req.engine == "scripted":
            engine = plan.engine()
        else:
            if req.engine_config is not None:
                cfg = ModelConfig(**req.engine_config.model_dump())
            else:
                cfg = ModelConfig(n_layers=2, n_heads=2, head_dim=8, hidden_dim=16)
            engine = _transformer(cfg.validate())
        final_text, trace = run_pipeline_tokens(
            engine, plan.prompt_tokens, _decode_config(req.decode), req.mode)
    except FanoutError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return GenerateResponse(
        task=plan.name,
        task_text=plan.task_text,
        mode=req.mode,
        final_text=final_text,
        trace=trace.to_json(),
        expected_answer=plan.expected_answer,
        correct=plan.check_answer(final_text),
    )


@app.post("/v1/bench", response_model=BenchResponse)
def bench(req: BenchRequest) -> BenchResponse:
    try:
        report = bench_suites(req.suites, _decode_config(req.decode),
                              count=req.count, base_seed=req.base_seed)
    except FanoutError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return BenchResponse(report=report)


@app.post("/v1/oracle", response_model=OracleResponse)
def oracle(req: OracleRequest) -> OracleResponse:
    try:
        results = run_oracles(req.checks, seed=req.seed, trials=req.trials)
    except KeyError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return OracleResponse(passed=all(r.passed for r in results),
                          results=[r.to_json() for r in results])


@app.post("/v1/dump-mask", response_model=DumpMaskResponse)
def dump_mask(req: DumpMaskRequest) -> DumpMaskResponse:
    try:
        layout = build_layout(req.prefix_len, req.title_lens)
        if req.body_lens:
            if len(req.body_lens) != len(req.title_lens):
                raise InvalidTaskError("body_lens must match title_lens")
            # a branch with body length L occupies steps 0..L (step 0 re-submits
            # the title's last token), padding afterwards
            for step in range(max(req.body_lens) + 1):
                layout.append_step([step <= bl for bl in req.body_lens])
    except FanoutError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return DumpMaskResponse(grid=mask_grid(layout), entries=len(layout))
