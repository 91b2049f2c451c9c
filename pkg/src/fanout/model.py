"""Minimal decoder-only transformer with externally supplied masks and positions.

Untrained, seeded random weights: the engine exists to make attention-mask
and position-id semantics exactly testable, not to produce meaningful text.
Every row of a request is computed independently (per-row projections,
per-row attention over its visible keys in ascending cache-index order),
so a row's logits depend only on (token, position, visible cache entries,
weights). Batched and one-at-a-time processing are therefore bit-identical,
which is what the branch-isolation oracle relies on.

All arithmetic is float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import vocab
from .engine import ForwardRequest, KVCache, row_index_array, validate_request
from .errors import InvalidConfigError, NonFiniteLogitsError

MLP_RATIO = 4
NORM_EPS = np.float32(1e-5)
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    head_dim: int
    hidden_dim: int
    vocab_size: int = vocab.VOCAB_SIZE
    rope_theta: float = 10000.0
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "n_heads", "head_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim != self.n_heads * self.head_dim:
            raise InvalidConfigError(
                f"hidden_dim {self.hidden_dim} != n_heads*head_dim "
                f"{self.n_heads}*{self.head_dim}"
            )
        if self.head_dim % 2 != 0:
            raise InvalidConfigError("head_dim must be even (rotary pairs)")
        if self.vocab_size < 260:
            raise InvalidConfigError(f"vocab_size must be >= 260, got {self.vocab_size}")
        if self.rope_theta <= 0:
            raise InvalidConfigError("rope_theta must be positive")
        return self


CONFIG_KEYS = ("n_layers", "n_heads", "head_dim", "hidden_dim",
               "vocab_size", "rope_theta", "seed")


def load_model_config(path) -> ModelConfig:
    """Read a JSON config file whose keys are exactly the ModelConfig fields."""
    raw = json.loads(Path(path).read_text("utf-8"))
    unknown = set(raw) - set(CONFIG_KEYS)
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
    return ModelConfig(**raw).validate()


def save_model_config(config: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(asdict(config), indent=2) + "\n", "utf-8")


def _init_weights(config: ModelConfig) -> dict:
    rng = np.random.default_rng(config.seed)
    d, v = config.hidden_dim, config.vocab_size
    m = MLP_RATIO * d

    def normal(*shape):
        return rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)

    weights = {"tok_emb": normal(v, d), "layers": []}
    for _ in range(config.n_layers):
        weights["layers"].append({
            "attn_norm": np.ones(d, dtype=np.float32),
            "wq": normal(d, d),
            "wk": normal(d, d),
            "wv": normal(d, d),
            "wo": normal(d, d),
            "mlp_norm": np.ones(d, dtype=np.float32),
            "w_gate": normal(d, m),
            "w_up": normal(d, m),
            "w_down": normal(m, d),
        })
    weights["final_norm"] = np.ones(d, dtype=np.float32)
    weights["lm_head"] = normal(d, v)
    return weights


def _rmsnorm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    ms = np.mean(np.square(x), dtype=np.float32)
    return (x * (np.float32(1.0) / np.sqrt(ms + NORM_EPS))) * w


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (np.float32(1.0) + np.exp(-x))


class TransformerEngine:
    """Immutable after init; safe for concurrent reads. One cache per session."""

    def __init__(self, config: ModelConfig, weights: dict | None = None):
        self.config = config.validate()
        self.vocab_size = config.vocab_size
        self.weights = weights if weights is not None else _init_weights(config)
        half = config.head_dim // 2
        self._inv_freq = (
            config.rope_theta
            ** -(np.arange(half, dtype=np.float32) * (2.0 / config.head_dim))
        ).astype(np.float32)
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._scale = np.float32(1.0 / np.sqrt(config.head_dim))

    def new_cache(self) -> KVCache:
        c = self.config
        return KVCache(c.n_layers, c.n_heads, c.head_dim)

    def _rope(self, x: np.ndarray, position: int) -> np.ndarray:
        """Rotate (n_heads, head_dim) by the absolute position, half-split style."""
        cs = self._rope_cache.get(position)
        if cs is None:
            angles = np.float32(position) * self._inv_freq
            cs = (np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32))
            self._rope_cache[position] = cs
        cos, sin = cs
        half = x.shape[-1] // 2
        x1, x2 = x[..., :half], x[..., half:]
        out = np.empty_like(x)
        out[..., :half] = x1 * cos - x2 * sin
        out[..., half:] = x1 * sin + x2 * cos
        return out

    def forward(self, request: ForwardRequest) -> np.ndarray:
        n_rows = validate_request(request)
        cache: KVCache = request.cache
        cfg = self.config
        base = cache.length
        cache.ensure_capacity(base + n_rows)
        cache.positions[base: base + n_rows] = np.asarray(request.position_ids)

        hidden = np.stack(
            [self.weights["tok_emb"][t] for t in request.token_ids]
        ) if n_rows else np.zeros((0, cfg.hidden_dim), dtype=np.float32)

        index_arrays = [None if isinstance(row, range) else row_index_array(row)
                        for row in request.mask_rows]

        for layer_idx in range(cfg.n_layers):
            lw = self.weights["layers"][layer_idx]
            k_store, v_store = cache.keys[layer_idx], cache.values[layer_idx]

            queries = np.empty((n_rows, cfg.n_heads, cfg.head_dim), dtype=np.float32)
            for r in range(n_rows):
                h = _rmsnorm(hidden[r], lw["attn_norm"])
                q = (h @ lw["wq"]).reshape(cfg.n_heads, cfg.head_dim)
                k = (h @ lw["wk"]).reshape(cfg.n_heads, cfg.head_dim)
                pos = request.position_ids[r]
                queries[r] = self._rope(q, pos)
                k_store[base + r] = self._rope(k, pos)
                v_store[base + r] = (h @ lw["wv"]).reshape(cfg.n_heads, cfg.head_dim)

            for r in range(n_rows):
                row = request.mask_rows[r]
                if index_arrays[r] is None:
                    k_vis = k_store[row.start: row.stop]
                    v_vis = v_store[row.start: row.stop]
                else:
                    k_vis = k_store[index_arrays[r]]
                    v_vis = v_store[index_arrays[r]]
                out = np.empty(cfg.hidden_dim, dtype=np.float32)
                for head in range(cfg.n_heads):
                    scores = (k_vis[:, head, :] @ queries[r, head]) * self._scale
                    scores -= scores.max()
                    exp = np.exp(scores)
                    attn = exp / exp.sum()
                    out[head * cfg.head_dim:(head + 1) * cfg.head_dim] = (
                        attn @ v_vis[:, head, :]
                    )
                hidden[r] = hidden[r] + out @ lw["wo"]

            for r in range(n_rows):
                h = _rmsnorm(hidden[r], lw["mlp_norm"])
                hidden[r] = hidden[r] + (
                    (_silu(h @ lw["w_gate"]) * (h @ lw["w_up"])) @ lw["w_down"]
                )

        cache.length = base + n_rows

        logits = np.empty((n_rows, cfg.vocab_size), dtype=np.float32)
        for r in range(n_rows):
            logits[r] = _rmsnorm(hidden[r], self.weights["final_norm"]) @ self.weights["lm_head"]
        if not np.all(np.isfinite(logits)):
            raise NonFiniteLogitsError("forward produced NaN/Inf logits")
        return logits


def init_model(config: ModelConfig) -> TransformerEngine:
    """Build an engine with weights generated deterministically from config.seed."""
    return TransformerEngine(config)


# --- weight dump/load: 8-byte LE header length, JSON manifest, raw <f4 data ---

_MAGIC = b"FANOUTW1"


def _tensor_items(weights: dict):
    yield "tok_emb", weights["tok_emb"]
    for i, layer in enumerate(weights["layers"]):
        for name in ("attn_norm", "wq", "wk", "wv", "wo",
                     "mlp_norm", "w_gate", "w_up", "w_down"):
            yield f"layers.{i}.{name}", layer[name]
    yield "final_norm", weights["final_norm"]
    yield "lm_head", weights["lm_head"]


def save_weights(engine: TransformerEngine, path) -> None:
    manifest = []
    blobs = []
    for name, arr in _tensor_items(engine.weights):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"config": asdict(engine.config), "tensors": manifest}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_weights(path) -> TransformerEngine:
    with open(path, "rb") as f:
        if f.read(8) != _MAGIC:
            raise InvalidConfigError(f"{path}: not a weight dump")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        config = ModelConfig(**header["config"]).validate()
        flat = {}
        for item in header["tensors"]:
            shape = tuple(item["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            flat[item["name"]] = data.astype(np.float32)
    weights = {"tok_emb": flat["tok_emb"], "layers": [],
               "final_norm": flat["final_norm"], "lm_head": flat["lm_head"]}
    for i in range(config.n_layers):
        weights["layers"].append(
            {k: flat[f"layers.{i}.{k}"]
             for k in ("attn_norm", "wq", "wk", "wv", "wo",
                       "mlp_norm", "w_gate", "w_up", "w_down")}
        )
    return TransformerEngine(config, weights)
