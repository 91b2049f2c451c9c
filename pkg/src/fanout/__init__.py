"""Branch-parallel greedy decoding in a single sequence with a tree mask."""

__version__ = "0.1.0"

from .engine import ForwardRequest, KVCache, TokenCache, truncate_cache
from .model import ModelConfig, init_model, load_model_config, load_weights, save_weights
from .scripted import ScriptedEngine
from .layout import build_layout, mask_grid, step_positions, tree_mask
from .grammar import apply_forcing, advance_forcing, parse_skeleton, stage1_prompt
from .pipeline import (DecodeConfig, DecodeTrace, ParallelBlock, run_pipeline,
                       run_stage1, run_stage2, run_stage3)
from .tasks import (TaskScript, gen_multidoc_task, gen_planning_task,
                    gen_retrieval_task, make_suite)
from .bench import analytic_speedup, run_bench

__all__ = [
    "ForwardRequest", "KVCache", "TokenCache", "truncate_cache",
    "ModelConfig", "init_model", "load_model_config", "load_weights", "save_weights",
    "ScriptedEngine",
    "build_layout", "mask_grid", "step_positions", "tree_mask",
    "apply_forcing", "advance_forcing", "parse_skeleton", "stage1_prompt",
    "DecodeConfig", "DecodeTrace", "ParallelBlock", "run_pipeline",
    "run_stage1", "run_stage2", "run_stage3",
    "TaskScript", "gen_multidoc_task", "gen_planning_task", "gen_retrieval_task",
    "make_suite",
    "analytic_speedup", "run_bench",
]
