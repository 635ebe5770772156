"""
Run configuration models.

Every subcommand reads one JSON file validated by RunConfig; unknown keys are
rejected. Individual values can be overridden with dotted key=value pairs,
which win over the file.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import get_settings
from .errors import ConfigError

logger = logging.getLogger(__name__)

TENSOR_GROUPS = ("embeddings", "agfm", "rcfe", "attention", "ffn", "structure", "head")

# Frozen groups for the two-stage recipe: annotation modulation first, motif branch second.
# The agfm group holds the annotation tables, null embeddings and every main-block modulation layer.
STAGE_FREEZE = {
    "joint": (),
    "agfm": ("embeddings", "rcfe", "attention", "ffn", "structure", "head"),
    "rcfe": ("embeddings", "agfm", "attention", "ffn", "structure", "head"),
}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DenoiserConfig(StrictModel):
    n_blocks: int = Field(2, ge=2, description="Transformer block count (even)")
    d_model: int = Field(64, ge=4, description="Hidden width")
    n_heads: int = Field(4, ge=1, description="Attention heads")
    d_ff: int = Field(256, ge=1, description="Feed-forward width")
    rcfe_blocks: Optional[int] = Field(None, ge=0, description="Control-branch block count, default n_blocks/2")
    rcfe_enabled: bool = Field(True, description="Build the motif control branch")
    structure_enabled: bool = Field(True, description="Build the final-block structure cross-attention")
    agfm_alpha_init: Literal["ones", "zeros"] = Field("ones", description="Initial gate-head weights")
    agfm_literal: bool = Field(False, description="Use gamma * x + beta instead of (1 + gamma) * x + beta")
    max_len: int = Field(512, ge=1, description="Longest sequence the position table covers")
    n_go: int = Field(0, ge=0, description="GO registry size")
    n_ipr: int = Field(0, ge=0, description="IPR registry size")
    n_ec: int = Field(0, ge=0, description="EC registry size")

    @model_validator(mode="after")
    def _check_shape(self):
        if self.n_blocks % 2:
            raise ValueError("n_blocks must be even")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.rcfe_blocks is not None and self.rcfe_blocks > self.n_blocks:
            raise ValueError("rcfe_blocks must not exceed n_blocks")
        return self

    @property
    def control_blocks(self) -> int:
        if not self.rcfe_enabled:
            return 0
        return self.n_blocks // 2 if self.rcfe_blocks is None else self.rcfe_blocks

    def registry_sizes(self) -> dict:
        return {"go": self.n_go, "ipr": self.n_ipr, "ec": self.n_ec}


class TrainConfig(StrictModel):
    T: int = Field(500, ge=1, description="Diffusion steps")
    schedule_kind: Literal["linear-alpha", "cosine-alpha"] = Field("linear-alpha", description="Noise schedule")
    batch_tokens: int = Field(4096, ge=1, description="Token budget per optimization step")
    lr: float = Field(4e-5, gt=0, description="Peak learning rate")
    weight_decay: float = Field(0.01, ge=0, description="Decoupled weight decay")
    betas: Tuple[float, float] = Field((0.9, 0.98), description="Adam moment coefficients")
    warmup_frac: float = Field(0.01, ge=0, le=1, description="Fraction of steps spent in linear warmup")
    condition_dropout: float = Field(0.5, ge=0, le=1, description="Per-channel drop probability")
    condition_dropout_mode: Literal["channel", "per-type"] = Field(
        "channel", description="Drop annotation types jointly or independently"
    )
    lambda_kind: Literal["reciprocal-t", "uniform"] = Field("reciprocal-t", description="Step weight of the loss")
    max_steps: int = Field(1000, ge=0, description="Optimizer updates")
    stage: Literal["joint", "agfm", "rcfe"] = Field("joint", description="Two-stage recipe stage")
    freeze: List[str] = Field(default_factory=list, description="Extra tensor groups kept frozen")
    log_every: int = Field(50, ge=1, description="Log a summary every N steps")
    seed: int = Field(0, description="Seed for corruption, dropout and batching")

    @field_validator("freeze")
    @classmethod
    def _check_groups(cls, value):
        unknown = sorted(set(value) - set(TENSOR_GROUPS))
        if unknown:
            raise ValueError(f"unknown tensor groups {unknown}; expected a subset of {list(TENSOR_GROUPS)}")
        return value

    def frozen_groups(self) -> tuple:
        return tuple(sorted(set(STAGE_FREEZE[self.stage]) | set(self.freeze)))


class SampleConfig(StrictModel):
    steps: int = Field(100, ge=1, description="Reverse iterations")
    length: Optional[int] = Field(None, ge=1, description="Fixed output length")
    length_range: Tuple[int, int] = Field((200, 400), description="Uniform length range when length is unset")
    temperature: float = Field(
        1.0, gt=0, description="Softmax temperature of Gumbel token draws, Gumbel commit order and the exact posterior"
    )
    seed: int = Field(0, description="Sampling seed")
    motif_mode: Literal["fixed", "dynamic"] = Field("fixed", description="Hold motif residues or rewrite them")
    n_sequences: int = Field(1, ge=1, description="Sequences written by one generate run")
    n_candidates: int = Field(1, ge=1, description="Candidates drawn for reranking")
    func_weight: float = Field(1.0, description="Weight of the function score in reranking")
    gumbel: bool = Field(False, description="Gumbel-max token choice instead of argmax")
    exact_posterior: bool = Field(False, description="Ancestral sampling from the reverse posterior")

    @field_validator("length_range")
    @classmethod
    def _check_range(cls, value):
        if value[0] < 1 or value[1] < value[0]:
            raise ValueError("length_range must satisfy 1 <= low <= high")
        return value


class CurationConfig(StrictModel):
    min_label_count: int = Field(100, ge=1, description="Labels with fewer supporting sequences are dropped")
    val_per_label: int = Field(30, ge=0, description="Validation sequences taken per label")
    max_len: int = Field(1024, ge=1, description="Longest accepted sequence")
    downsample: int = Field(1, ge=1, description="Keep every Nth input record")
    registries_path: Optional[str] = Field(None, description="Extra copy of registries.json")


class SyntheticSpec(StrictModel):
    n_classes: int = Field(4, ge=1, description="Functional classes")
    signatures: Optional[List[List[str]]] = Field(None, description="Per-class signatures; drawn when unset")
    signatures_per_class: int = Field(1, ge=1, description="Signatures drawn per class")
    signature_length: int = Field(8, ge=6, le=12, description="Length of drawn signatures")
    background_min: int = Field(48, ge=1, description="Shortest background")
    background_max: int = Field(64, ge=1, description="Longest background")
    insertions_per_label: int = Field(1, ge=1, description="Signature copies inserted per assigned label")
    max_labels: int = Field(2, ge=1, description="Labels per record are drawn from 1..max_labels")
    n_records: int = Field(2000, ge=1, description="Records generated")
    val_frac: float = Field(0.1, ge=0, lt=1, description="Tail fraction of the corpus held out for validation")
    seed: int = Field(0, description="Corpus seed")

    @model_validator(mode="after")
    def _check_spec(self):
        if self.background_max < self.background_min:
            raise ValueError("background_max must be >= background_min")
        if self.max_labels > self.n_classes:
            raise ValueError("max_labels must not exceed n_classes")
        if self.signatures is not None:
            if len(self.signatures) != self.n_classes:
                raise ValueError("signatures must list one entry per class")
            flat = [signature for group in self.signatures for signature in group]
            if len(set(flat)) != len(flat):
                raise ValueError("signatures must be unique across classes")
            if any(not 6 <= len(signature) <= 12 for signature in flat):
                raise ValueError("signatures must be 6 to 12 residues long")
        return self


class EvaluateConfig(StrictModel):
    threshold: Union[float, Dict[str, float]] = Field(
        0.5, description="Decision threshold, or per-prefix thresholds with \"*\" as the fallback"
    )
    k: int = Field(3, ge=1, description="Spectrum k-mer order")


class RunConfig(StrictModel):
    seed: int = Field(0, description="Global seed")
    workers: int = Field(1, ge=1, description="Worker pool size; 1 is deterministic")
    model: DenoiserConfig = Field(default_factory=DenoiserConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sample: SampleConfig = Field(default_factory=SampleConfig)
    curation: CurationConfig = Field(default_factory=CurationConfig)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    evaluate: EvaluateConfig = Field(default_factory=EvaluateConfig)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(payload: dict, overrides) -> dict:
    """
    Apply key=value overrides addressed by dotted path.

    Args:
        payload: Raw config dict, modified in place
        overrides: Iterable of "section.key=value" strings; values parse as JSON when possible

    Returns:
        dict: The updated payload
    """
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", key=item)
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        target = payload
        for part in parts[:-1]:
            node = target.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section value", key=key)
            target = node
        target[parts[-1]] = _parse_value(raw)
        logger.debug(f"Config override {key} = {target[parts[-1]]!r}")
    return payload


def resolve_config_path(path) -> Path:
    path = Path(path)
    if not path.is_absolute() and not path.exists():
        config_dir = get_settings()["config_dir"]
        if config_dir:
            path = Path(config_dir) / path
    return path


def load_config(path=None, overrides=()) -> RunConfig:
    """
    Load and validate a run configuration.

    Args:
        path: JSON file, or None for defaults; relative paths fall back to FUNGEN_CONFIG_DIR
        overrides: "key=value" strings applied after the file

    Returns:
        RunConfig: Validated configuration

    Raises:
        ConfigError: Unreadable file, unknown key or invalid value
    """
    payload = {}
    if path:
        resolved = resolve_config_path(path)
        try:
            payload = json.loads(resolved.read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config {resolved}: {e}", key=str(resolved)) from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {resolved} is not valid JSON: {e}", key=str(resolved)) from e
        if not isinstance(payload, dict):
            raise ConfigError(f"config {resolved} must hold a JSON object", key=str(resolved))

    apply_overrides(payload, overrides)
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"invalid config value at {key}: {first['msg']}", key=key) from e
