"""
============================================================================
PIPELINE CONFIGURATION
============================================================================
One JSON file, validated in full before any stage runs:

    {
      "seed": 13,
      "paths":    {...},       file inputs and outputs
      "labeling": {...},       k, top_n, delta, pattern catalog
      "backend":  {...},       mock | transformers, prediction cache
      "model":    {...},       stub | transformer encoder
      "loss":     {...},       alpha_strong, lambda, P, P_w
      "pretrain": {...}, "finetune": {...}, "selftrain": {...}
    }

Command-line overrides use dotted keys (`--set loss.lambda=0.05`); values
are parsed as JSON and fall back to plain strings.
============================================================================
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.core.labeling import DEFAULT_DELTA, DEFAULT_K, DEFAULT_TOP_N
from src.core.model import EncoderSpec
from src.core.training import LossConfig, TrainConfig
from src.core.types import ConfigurationError
from src.memory.corpus import write_lines_atomic

logger = logging.getLogger("TypeLabel.Config")

RESOLVED_CONFIG_TEMPLATE = "resolved_config.{stage}.json"


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vocab: Optional[str] = None
    general: Optional[str] = None
    fine: Optional[str] = None
    pronouns: Optional[str] = None
    # Unlabeled/weak samples to label, and raw text to mine pronoun mentions from
    input_samples: Optional[str] = None
    raw_text: Optional[str] = None
    labeled_output: Optional[str] = None
    human: Optional[str] = None
    weak: Optional[str] = None
    dev: Optional[str] = None
    test: Optional[str] = None
    pattern_list: Optional[str] = None
    baseline_dir: Optional[str] = None
    h_dir: Optional[str] = None
    m_dir: Optional[str] = None
    student_dir: Optional[str] = None
    eval_checkpoint: Optional[str] = None
    eval_output: Optional[str] = None
    mapping: Optional[str] = None
    fg_input: Optional[str] = None
    fg_output: Optional[str] = None


class LabelingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k: int = Field(DEFAULT_K, gt=0)
    top_n: int = Field(DEFAULT_TOP_N, gt=0)
    delta: float = Field(DEFAULT_DELTA, gt=0.0)
    pattern_file: Optional[str] = None
    single_pattern: bool = False


class BackendConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["mock", "transformers"] = "mock"
    checkpoint: str = "bert-base-cased"
    mock_table: Optional[str] = None
    redis_url: Optional[str] = Field(default_factory=lambda: os.getenv("TYPELABEL_REDIS_URL"))
    device: Optional[str] = Field(default_factory=lambda: os.getenv("TYPELABEL_DEVICE"))


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    encoder: Literal["stub", "transformer"] = "stub"
    hidden_size: int = Field(64, gt=0)
    buckets: int = Field(4096, gt=0)
    checkpoint: str = "bert-base-cased"
    max_length: int = Field(128, gt=8)

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(
            kind=self.encoder,
            hidden_size=self.hidden_size,
            buckets=self.buckets,
            checkpoint=self.checkpoint,
            max_length=self.max_length,
        )


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 13
    paths: PathsConfig = Field(default_factory=PathsConfig)
    labeling: LabelingConfig = Field(default_factory=LabelingConfig)
    backend: BackendConfig = Field(default_factory=BackendConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    pretrain: TrainConfig = Field(default_factory=TrainConfig)
    finetune: TrainConfig = Field(default_factory=TrainConfig)
    selftrain: TrainConfig = Field(default_factory=TrainConfig)

    def require_path(self, name: str) -> str:
        """A configured path, or ConfigurationError naming the missing key."""
        value = getattr(self.paths, name)
        if not value:
            raise ConfigurationError(f"paths.{name}", "required by this stage but not set")
        return value

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", by_alias=True), indent=2, sort_keys=True)


# =============================================================================
# LOADING
# =============================================================================

def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data: Dict[str, Any], assignment: str) -> None:
    """Apply one `dotted.key=value` assignment to a raw config dict in place."""
    key, sep, raw = assignment.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigurationError(assignment, "override must look like dotted.key=value")
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigurationError(key, f"'{part}' is not a section")
        node = child
    node[parts[-1]] = _parse_value(raw)


def _format_validation(error: ValidationError) -> ConfigurationError:
    first = error.errors()[0]
    key = ".".join(str(part) for part in first["loc"]) or "<root>"
    return ConfigurationError(key, f"{first['msg']} ({error.error_count()} error(s))")


def load_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()) -> PipelineConfig:
    """
    Read, override and validate the pipeline config.

    Raises:
        ConfigurationError: unreadable file, bad override or invalid value
    """
    data: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigurationError("--config", f"config file not found: {config_path}")
        try:
            data = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError("--config", f"{config_path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError("--config", f"{config_path} must hold a JSON object")
    for assignment in overrides:
        apply_override(data, assignment)
    try:
        cfg = PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise _format_validation(e) from e
    logger.debug(f"[CONFIG] Loaded config from {path or '<defaults>'}")
    return cfg


def write_resolved_config(cfg: PipelineConfig, directory: Union[str, Path], stage: str) -> Path:
    """Write the effective config next to a stage's outputs."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    target = out / RESOLVED_CONFIG_TEMPLATE.format(stage=stage)
    write_lines_atomic(target, [cfg.to_json()])
    return target
