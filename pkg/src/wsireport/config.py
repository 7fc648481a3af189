"""Run configuration.

Every section rejects unknown keys. Defaults are the published model settings
(region size 96, 512-dim hidden states, 3-layer/8-head decoder, a 2048-slot
context memory, beam size 3, Adam at 1e-4 decayed by 0.8 per epoch); toy runs
override them through a config file or ``--set`` flags.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

ARMS = ("base", "cmc", "cmc_lgh")
ARM_LABELS = {"base": "Base", "cmc": "+CMC", "cmc_lgh": "+CMC+LGH"}
REGION_SWEEP = (64, 96, 128, 256, 384, 512)


class ConfigError(ValueError):
    """Raised when a config file cannot be read or fails validation."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EncoderConfig(_Section):
    region_size: int = Field(96, ge=1)
    d_model: int = 512
    d_in: int = 1024
    local_layers: int = Field(1, ge=0)
    global_layers: int = Field(1, ge=0)
    heads: int = 8
    ffn_dim: int = 1024
    pool_dim: int = 128
    use_positional_encoding: bool = True
    dropout: float = Field(0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        return self


class CMCConfig(_Section):
    memory_size: int = Field(2048, ge=1)
    num_prototypes: int = Field(64, ge=1)
    heads: int = 8


class DecoderConfig(_Section):
    layers: int = Field(3, ge=1)
    heads: int = 8
    d_model: int = 512
    ffn_dim: int = 1024
    vocab_size: Optional[int] = None
    max_len: int = Field(100, ge=3)
    beam_size: int = Field(3, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)


class ModelConfig(_Section):
    arm: Literal["base", "cmc", "cmc_lgh", "lgh"] = "cmc_lgh"
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    cmc: CMCConfig = Field(default_factory=CMCConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)

    @property
    def use_cmc(self) -> bool:
        return self.arm in ("cmc", "cmc_lgh")

    @property
    def use_lgh(self) -> bool:
        return self.arm in ("lgh", "cmc_lgh")

    @model_validator(mode="after")
    def _dims_agree(self):
        if self.encoder.d_model != self.decoder.d_model:
            raise ValueError("encoder.d_model and decoder.d_model must match")
        for name, heads in (("cmc", self.cmc.heads), ("decoder", self.decoder.heads)):
            if self.encoder.d_model % heads:
                raise ValueError(f"d_model not divisible by {name}.heads={heads}")
        return self


class TokenizerConfig(_Section):
    min_freq: int = Field(3, ge=1)
    max_len: int = Field(100, ge=3)


class TrainConfig(_Section):
    learning_rate: float = Field(1e-4, gt=0)
    epoch_decay: float = Field(0.8, gt=0, le=1)
    decay_every: int = Field(1, ge=1)
    weight_decay: float = Field(0.0, ge=0)
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(1, ge=1)
    seed: int = 0
    label_smoothing: float = Field(0.0, ge=0, lt=1)
    grad_clip: Optional[float] = 5.0
    eval_every: int = Field(1, ge=1)
    eval_beam_size: Optional[int] = None
    stop_loss: Optional[float] = None


class FinetuneConfig(_Section):
    freeze_encoder: bool = False
    learning_rate: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(1, ge=1)
    monte_carlo_folds: int = Field(5, ge=1)
    survival_bins: int = Field(4, ge=1)
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0


class SynthConfig(_Section):
    num_wsis: int = Field(20, ge=1)
    n_min: int = 64
    n_max: int = 256
    d_in: int = 1024
    num_themes: int = Field(4, ge=2)
    max_themes_per_wsi: int = Field(3, ge=1)
    noise_scale: float = Field(0.5, ge=0)
    center_scale: float = 1.0
    seed: int = 0


class DataConfig(_Section):
    manifest: Optional[str] = None
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0

    @field_validator("split_ratios")
    @classmethod
    def _sum_to_one(cls, v):
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"split ratios {v} do not sum to 1")
        return v


class RunConfig(_Section):
    seed: int = 0
    data: DataConfig = Field(default_factory=DataConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    tokenizer: TokenizerConfig = Field(default_factory=TokenizerConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    ablation_seeds: Optional[list[int]] = None

    @model_validator(mode="before")
    @classmethod
    def _inherit_seed(cls, doc):
        """Sections without an explicit seed take the run seed."""
        if not isinstance(doc, dict):
            return doc
        seed = doc.get("seed", 0)
        for name in ("synth", "train", "finetune"):
            section = doc.get(name)
            if section is None:
                doc[name] = {"seed": seed}
            elif isinstance(section, dict) and "seed" not in section:
                doc[name] = {**section, "seed": seed}
        return doc

    def seeds_for_ablation(self) -> list[int]:
        return list(self.ablation_seeds) if self.ablation_seeds else [self.seed]


def _set_dotted(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"bad override {item!r}, expected key=value")
        key, raw = item.split("=", 1)
        _set_dotted(doc, key.strip(), yaml.safe_load(raw))
    return doc


def load_config(path: Optional[str | Path] = None, overrides: Optional[list[str]] = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} is not a mapping")
    apply_overrides(doc, overrides or [])
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"invalid config key {loc}: {first['msg']}") from exc


def dump_config(cfg: BaseModel) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
