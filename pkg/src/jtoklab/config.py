"""Run configuration: one flat, closed-world JSON document."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised with the offending field path (``field``) and a message."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1] = SCHEMA_VERSION

    # backbone
    vocab_size: int = 512
    hidden_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 128
    ffn_kind: Literal["dense", "moe"] = "dense"
    moe_n_experts: int = 4
    moe_top_k: int = 2
    moe_n_shared: int = 1
    seq_len: int = 128
    norm_eps: float = 1e-6
    init_std: float = 0.02

    # token-indexed plugin
    plugin: Literal["none", "jtok", "jtok_m"] = "none"
    n_e: int = 5
    top_k: int = 2
    aux_coef: float = 1e-4
    plugin_eps: float = 1e-6
    plugin_norm: bool = True
    scale_factor: bool = True
    table_init_std: float = 0.01

    # training
    seed: int = 0
    steps: int = 500
    batch_size: int = 8
    lr: float = 3e-3
    min_lr_ratio: float = 0.1
    warmup_ratio: float = 0.05
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    log_every: int = 1

    # synthetic corpus
    corpus_tokens: int = 200_000
    corpus_zipf: float = 1.1
    corpus_seed: int = 1234
    corpus_order: int = 1
    # held-out tail of the corpus used by evaluate()
    eval_fraction: float = 0.1
    eval_windows: int = 256

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        positive = ["vocab_size", "hidden_dim", "n_layers", "n_heads", "ffn_dim", "moe_n_experts",
                    "moe_top_k", "seq_len", "n_e", "top_k", "steps", "batch_size", "log_every",
                    "corpus_tokens"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be a positive integer")
        if self.moe_n_shared < 0:
            raise ValueError("moe_n_shared: must be non-negative")
        if self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim: must be divisible by n_heads")
        if (self.hidden_dim // self.n_heads) % 2:
            raise ValueError("hidden_dim: head dimension must be even for rotary positions")
        if self.moe_top_k > self.moe_n_experts:
            raise ValueError("moe_top_k: must not exceed moe_n_experts")
        if self.top_k > self.n_e:
            raise ValueError("top_k: must not exceed n_e")
        if self.plugin_eps <= 0 or self.norm_eps < 0:
            raise ValueError("plugin_eps: must be positive")
        if not self.scale_factor and self.plugin != "jtok_m":
            raise ValueError("scale_factor: only meaningful with plugin=jtok_m")
        if not self.plugin_norm and self.plugin == "none":
            raise ValueError("plugin_norm: only meaningful with a plugin")
        if not 1 <= self.corpus_order <= 3:
            raise ValueError("corpus_order: must be 1, 2 or 3")
        if self.vocab_size ** self.corpus_order > 2 ** 22:
            raise ValueError("corpus_order: context table too large for this vocab_size")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ValueError("eval_fraction: must lie in (0, 1)")
        if self.eval_windows < 1:
            raise ValueError("eval_windows: must be a positive integer")
        held = int(self.corpus_tokens * self.eval_fraction)
        if held < self.seq_len + 1 or self.corpus_tokens - held <= self.seq_len + 1:
            raise ValueError("corpus_tokens: too small for seq_len and eval_fraction")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def replace(self, **changes) -> "ModelConfig":
        return make_config({**self.model_dump(), **changes})


def make_config(data: dict) -> ModelConfig:
    try:
        return ModelConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"])
        msg = err["msg"]
        if not loc and ":" in msg:
            # model-level checks carry the field name in the message
            loc, msg = msg.split(":", 1)
            loc = loc.replace("Value error, ", "").strip()
        raise ConfigError(loc or "<root>", msg.strip()) from None


def load_config(path: str | Path, overrides: dict | None = None) -> ModelConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("<document>", "config must be a JSON object")
    if "schema_version" not in data:
        raise ConfigError("schema_version", "field required")
    data.update(overrides or {})
    return make_config(data)


def coerce_override(key: str, raw: str):
    """Parse a ``--key value`` command-line override into the field's type."""
    fields = ModelConfig.model_fields
    if key not in fields:
        raise ConfigError(key, "unknown config field")
    ann = fields[key].annotation
    if ann is bool:
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(key, f"expected a boolean, got {raw!r}")
    if ann is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got {raw!r}") from None
    if ann is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(key, f"expected a real number, got {raw!r}") from None
    return raw
