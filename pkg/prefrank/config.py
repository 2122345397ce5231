"""Configuration management for prefrank.

Process-level settings (threads, logging) come from the environment through
pydantic-settings. Everything that defines a run lives in a flat
``key = value`` file parsed into :class:`RunConfig`.
"""

import json
import logging
import re
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from prefrank.errors import ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process settings loaded from ``PREFRANK_*`` environment variables."""

    threads: int = Field(1, ge=1)
    log_level: str = "INFO"
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    model_config = SettingsConfigDict(
        env_prefix="PREFRANK_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )


class InputFormat(str, Enum):
    """Layout of a raw interaction file."""

    PAIRS = "pairs"
    ADJACENCY = "adjacency"


class Activation(str, Enum):
    LEAKY_RELU = "leaky_relu"
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    IDENTITY = "identity"


class Aggregator(str, Enum):
    ATTENTIVE = "attentive"
    MEAN = "mean"


class L2Scope(str, Enum):
    ALL = "all"
    EMBEDDINGS = "embeddings"


class Precision(str, Enum):
    FLOAT64 = "float64"
    FLOAT32 = "float32"


class ModelConfig(BaseModel):
    """Shape and behaviour of the representation stack."""

    num_tasks: int = Field(..., ge=1, le=8)
    layer_dims: tuple[int, ...]
    activation: Activation = Activation.LEAKY_RELU
    negative_slope: float = 0.2
    logit_activation: Activation = Activation.LEAKY_RELU
    aggregator: Aggregator = Aggregator.ATTENTIVE
    attention_dim: Optional[int] = Field(None, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    dtype: Precision = Precision.FLOAT64

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_dims(self) -> "ModelConfig":
        if len(self.layer_dims) != self.num_tasks:
            raise ValueError(
                f"layer_dims has {len(self.layer_dims)} entries but num_tasks={self.num_tasks}"
            )
        if any(d < 1 for d in self.layer_dims):
            raise ValueError(f"layer widths must be >= 1, got {self.layer_dims}")
        return self

    @property
    def total_eval_dim(self) -> int:
        return sum(self.layer_dims)

    def attention_width(self, layer: int) -> int:
        """Hidden width of the attention MLP in ``layer`` (1-based)."""
        if self.attention_dim is not None:
            return self.attention_dim
        return self.layer_dims[layer - 1]


class TrainConfig(BaseModel):
    """Optimisation and stopping parameters."""

    lr: float = Field(1e-4, ge=0.0)
    l2: float = Field(1e-6, ge=0.0)
    l2_scope: L2Scope = L2Scope.ALL
    batch_size: int = Field(1024, ge=1)
    max_epochs: int = Field(400, ge=1)
    patience: int = Field(10, ge=0)
    top_n: int = Field(20, ge=1)
    seed: int = Field(42, ge=0)
    merge_validation: bool = False

    model_config = ConfigDict(frozen=True)


_OPTIONAL_KEYS = ("raw_path", "report_dir", "layer_dims", "logit_activation", "attention_dim")


def _is_blank(value: Any) -> bool:
    return isinstance(value, str) and value.strip().lower() in ("", "none", "same")


class RunConfig(BaseModel):
    """Every key a run can set. Unknown keys are rejected."""

    # Paths
    raw_path: Optional[Path] = None
    raw_format: InputFormat = InputFormat.PAIRS
    corpus_path: Path = Path("data/corpus.txt")
    output_dir: Path = Path("runs/default")
    report_dir: Optional[Path] = None

    # Data preparation
    min_core: int = Field(10, ge=1)
    test_frac: float = Field(0.2, gt=0.0, lt=1.0)
    valid_frac: float = Field(0.125, ge=0.0, le=0.5)
    seed: int = Field(42, ge=0)

    # Model
    num_tasks: int = Field(2, ge=1, le=8)
    embedding_dim: int = Field(256, ge=1)
    layer_dims: Optional[tuple[int, ...]] = None
    activation: Activation = Activation.LEAKY_RELU
    negative_slope: float = Field(0.2, ge=0.0)
    logit_activation: Optional[Activation] = None
    aggregator: Aggregator = Aggregator.ATTENTIVE
    attention_dim: Optional[int] = Field(None, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    dtype: Precision = Precision.FLOAT64

    # Training
    lr: float = Field(1e-4, ge=0.0)
    l2: float = Field(1e-6, ge=0.0)
    l2_scope: L2Scope = L2Scope.ALL
    batch_size: int = Field(1024, ge=1)
    max_epochs: int = Field(400, ge=1)
    patience: int = Field(10, ge=0)
    merge_validation: bool = False

    # Evaluation
    top_n: int = Field(20, ge=1)

    model_config = ConfigDict(extra="forbid", frozen=True)

    @field_validator(*_OPTIONAL_KEYS, mode="before")
    @classmethod
    def _blank_is_none(cls, value: Any) -> Any:
        return None if _is_blank(value) else value

    @field_validator("layer_dims", mode="before")
    @classmethod
    def _split_dims(cls, value: Any) -> Any:
        # runs before _blank_is_none
        if _is_blank(value):
            return None
        if isinstance(value, str):
            return tuple(int(part) for part in value.split(",") if part.strip())
        return value

    @model_validator(mode="after")
    def _check_widths(self) -> "RunConfig":
        if self.layer_dims is not None:
            if len(self.layer_dims) != self.num_tasks:
                raise ValueError(
                    f"layer_dims has {len(self.layer_dims)} entries but num_tasks={self.num_tasks}"
                )
        elif self.embedding_dim < self.num_tasks:
            raise ValueError(
                f"embedding_dim={self.embedding_dim} cannot be split across {self.num_tasks} tasks"
            )
        return self

    @property
    def resolved_layer_dims(self) -> tuple[int, ...]:
        """Per-layer widths; by default the concatenated width is ``embedding_dim``."""
        if self.layer_dims is not None:
            return self.layer_dims
        return (self.embedding_dim // self.num_tasks,) * self.num_tasks

    @property
    def resolved_report_dir(self) -> Path:
        return self.report_dir if self.report_dir is not None else self.output_dir

    def network(self) -> ModelConfig:
        return ModelConfig(
            num_tasks=self.num_tasks,
            layer_dims=self.resolved_layer_dims,
            activation=self.activation,
            negative_slope=self.negative_slope,
            logit_activation=self.logit_activation or self.activation,
            aggregator=self.aggregator,
            attention_dim=self.attention_dim,
            dropout=self.dropout,
            dtype=self.dtype,
        )

    def training(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            l2=self.l2,
            l2_scope=self.l2_scope,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            top_n=self.top_n,
            seed=self.seed,
            merge_validation=self.merge_validation,
        )

    def to_text(self) -> str:
        """Render the canonical flat ``key = value`` form."""
        lines = []
        for key in type(self).model_fields:
            lines.append(f"{key} = {_format_value(getattr(self, key))}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Return a validated copy with ``overrides`` applied."""
        data = self.model_dump()
        data.update(overrides)
        return build_run_config(data)


_COMMENT = re.compile(r"(?:^|\s)#.*$")
_DECODER = json.JSONDecoder()


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    # quote anything the parser would otherwise cut or strip
    if text != text.strip() or text.startswith('"') or _COMMENT.search(text):
        return json.dumps(text)
    return text


def _parse_value(text: str, where: str) -> str:
    text = text.strip()
    if not text.startswith('"'):
        return _COMMENT.sub("", text).strip()
    try:
        value, end = _DECODER.raw_decode(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{where}: unterminated quoted value") from e
    if not isinstance(value, str) or _COMMENT.sub("", text[end:]).strip():
        raise ConfigError(f"{where}: unexpected text after quoted value")
    return value


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat ``key = value`` lines into a dict of raw strings.

    ``#`` starts a comment at the beginning of a line or after whitespace.
    Values may be double-quoted to keep leading spaces or a ``" #"``.
    """
    values: dict[str, str] = {}
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{line_no}"
        key, sep, rest = raw_line.partition("=")
        if not sep or _COMMENT.search(key):
            if _COMMENT.sub("", raw_line).strip():
                raise ConfigError(f"{where}: expected 'key = value', got {raw_line!r}")
            continue
        key = key.strip()
        if not key:
            raise ConfigError(f"{where}: empty key")
        if key in values:
            raise ConfigError(f"{where}: duplicate key '{key}'")
        values[key] = _parse_value(rest, where)
    return values


def parse_override(item: str) -> tuple[str, str]:
    """Split one ``--set key=value`` argument."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, value = (part.strip() for part in item.split("=", 1))
    if not key:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    return key, value


def build_run_config(values: dict[str, Any]) -> RunConfig:
    """Validate raw values into a RunConfig, translating pydantic errors."""
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}"
            for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from e


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[list[str]] = None,
    seed: Optional[int] = None
) -> RunConfig:
    """Load a RunConfig from ``path`` and apply CLI overrides.

    Args:
        path: Flat config file; ``None`` starts from the defaults.
        overrides: ``key=value`` strings from repeated ``--set`` flags.
        seed: Value of ``--seed``; wins over the file and ``--set``.

    Returns:
        Validated RunConfig.

    Raises:
        ConfigError: If the file is unreadable or any value is invalid.
    """
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), source=str(path)))
        logger.debug(f"Loaded {len(values)} keys from {path}")

    for item in overrides or []:
        key, value = parse_override(item)
        values[key] = value

    if seed is not None:
        values["seed"] = seed

    return build_run_config(values)


# Singleton instance
settings = Settings()
