"""Configuration dataclasses and the flat key=value config file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class BackboneConfig:
    """Shapes of the frozen decoder / bidirectional encoder pair."""

    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    n_encoder_layers: int = 2
    max_ctx: int = 1024
    vocab_size: int = 0  # filled in once the vocabulary is built

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size <= 0:
            raise ValueError("vocab_size must be set before building a backbone")


@dataclass
class PromptConfig:
    prompt_len_gen: int = 50
    prompt_len_rec: int = 10
    max_new_tokens: int = 24
    # decode spec: "greedy" | "beam:<width>" | "topk:<k>,<seed>"
    decode: str = "greedy"
    # "last" follows the backbone's last-token convention; "mean" is optional
    pooling: str = "last"
    max_context_tokens: int = 256


@dataclass
class TrainConfig:
    stage: str = "fuse_pretrain"  # fuse_pretrain | generation | recommendation
    lr: float = 1e-4
    batch_size: int = 8
    max_steps: int = 500
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only at the end
    grad_clip: float = 1.0
    rec_loss_kind: str = "bce"  # "bce" (literal) or "softmax_ce" (comparison flag)
    gold_template: bool = False

    # desk-scale defaults; the fusion stage needs a hotter rate than the
    # subtask stages because its graph table starts near zero
    STAGE_LRS = {"fuse_pretrain": 2e-3, "generation": 1e-4, "recommendation": 1e-4}
    STAGE_BATCH = {"fuse_pretrain": 8, "generation": 8, "recommendation": 64}

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        cfg = cls(
            stage=stage,
            lr=cls.STAGE_LRS[stage],
            batch_size=cls.STAGE_BATCH[stage],
        )
        return dataclasses.replace(cfg, **overrides)

    def validate(self) -> None:
        if self.stage not in self.STAGE_LRS:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr <= 0 or self.batch_size <= 0 or self.max_steps <= 0:
            raise ValueError("lr, batch_size and max_steps must be positive")


def config_digest(*cfgs) -> str:
    blob = json.dumps(
        [dataclasses.asdict(c) if dataclasses.is_dataclass(c) else c for c in cfgs],
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(value: str):
    low = value.strip()
    if low.lower() in ("true", "false"):
        return low.lower() == "true"
    for cast in (int, float):
        try:
            return cast(low)
        except ValueError:
            continue
    return low


def load_flat_config(path) -> dict:
    """Parse a flat `key = value` text file; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(value)
    return out


def apply_flat_config(cfg, flat: dict):
    """Overlay flat-file keys onto a dataclass config, ignoring foreign keys."""
    names = {f.name for f in dataclasses.fields(cfg)}
    kwargs = {k: v for k, v in flat.items() if k in names}
    return dataclasses.replace(cfg, **kwargs)
