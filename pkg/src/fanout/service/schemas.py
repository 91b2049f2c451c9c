"""Request/response models for the HTTP service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

Suite = Literal["retrieval", "multidoc", "planning", "single", "twoblock"]
Mode = Literal["normal", "parallel"]


class EngineConfig(BaseModel):
    n_layers: int = 2
    n_heads: int = 2
    head_dim: int = 8
    hidden_dim: int = 16
    vocab_size: int = 262
    rope_theta: float = 10000.0
    seed: int = 0


class DecodeCaps(BaseModel):
    max_skeleton_tokens: int = Field(512, ge=1)
    max_steps_per_branch: int = Field(128, ge=1)
    max_continuation_tokens: int = Field(512, ge=1)


class GenerateRequest(BaseModel):
    suite: Suite = "retrieval"
    seed: int = 0
    n: Optional[int] = None          # branch count for retrieval/multidoc
    mode: Mode = "parallel"
    engine: Literal["scripted", "transformer"] = "scripted"
    engine_config: Optional[EngineConfig] = None
    decode: Optional[DecodeCaps] = None


class GenerateResponse(BaseModel):
    task: str
    task_text: str
    mode: Mode
    final_text: str
    trace: dict
    expected_answer: Optional[str] = None
    correct: Optional[bool] = None


class BenchRequest(BaseModel):
    suites: list[Suite] = ["retrieval", "multidoc", "planning"]
    count: Optional[int] = Field(None, ge=1)
    base_seed: Optional[int] = None
    decode: Optional[DecodeCaps] = None


class BenchResponse(BaseModel):
    report: dict


class OracleRequest(BaseModel):
    checks: list[str] = ["all"]
    seed: int = 0
    trials: dict[str, int] = {}


class OracleResponse(BaseModel):
    passed: bool
    results: list[dict]


class DumpMaskRequest(BaseModel):
    prefix_len: int = Field(ge=0)
    title_lens: list[int]
    body_lens: Optional[list[int]] = None


class DumpMaskResponse(BaseModel):
    grid: str
    entries: int


class HealthResponse(BaseModel):
    status: str
    version: str
