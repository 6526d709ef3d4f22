"""
Spatial Forcing Lab - Configuration Module

Process settings come from the environment; experiment settings come from
plain-text ``key = value`` files.
"""
import enum
import math
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.exceptions import ConfigError
from src.scene.models import Difficulty


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="SF_",
        extra="ignore",
    )

    # --- Logging ---
    log_level: str = Field(default="INFO")
    log_format: str = Field(default="console", description="console or json")

    # --- Runs ---
    runs_dir: str = Field(default="./runs", description="Root directory for run outputs")
    workers: int = Field(default=1, ge=1, description="Parallel ablation cells")
    record_wall_time: bool = Field(
        default=False,
        description="Write wall_ms into metrics.csv (breaks byte-identical reruns)",
    )


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


# Convenience alias
settings = get_settings()


class LrSchedule(str, enum.Enum):
    """Learning-rate schedules."""
    CONSTANT = "constant"
    COSINE = "cosine"


class TargetKind(str, enum.Enum):
    """Alignment target representations."""
    GEOMETRY = "geometry"
    GEOMETRY_NO_PE = "geometry_no_pe"
    APPEARANCE = "appearance"


class ModelConfig(BaseModel):
    """Architecture of the toy VLA and its alignment head."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    d_model: int = Field(default=64, gt=0)
    n_layers: int = Field(default=6, gt=0)
    n_heads: int = Field(default=4, gt=0)
    patch_size: int = Field(default=8, gt=0)
    image_height: int = Field(default=32, gt=0)
    image_width: int = Field(default=32, gt=0)
    image_channels: int = Field(default=3, gt=0)
    n_views: int = Field(default=2, gt=0)
    vocab_size: int = Field(default=16, gt=0)
    n_lang_tokens: int = Field(default=4, gt=0)
    n_action_queries: int = Field(default=4, gt=0)
    action_dim: int = Field(default=4, gt=0)
    horizon: int = Field(default=4, gt=0)
    aligned_layer: int = Field(default=4, gt=0)
    d_teacher: int = Field(default=64, gt=0)
    projector_hidden: int = Field(default=128, gt=0)
    action_hidden: int = Field(default=64, gt=0)
    pe_scale: float = Field(default=0.1, ge=0.0)

    @model_validator(mode="after")
    def _check_geometry(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("image dims must be divisible by patch_size")
        if self.image_channels != 3:
            raise ValueError("images are RGB; image_channels must be 3")
        if not 1 <= self.aligned_layer <= self.n_layers:
            raise ValueError(f"aligned_layer must lie in [1, {self.n_layers}]")
        if self.horizon != self.n_action_queries:
            raise ValueError("each action query predicts one step: horizon == n_action_queries")
        if self.d_teacher % 16:
            raise ValueError("d_teacher must be a multiple of 16 (8 stats x sin/cos pairs)")
        return self

    @property
    def grid_rows(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_cols(self) -> int:
        return self.image_width // self.patch_size

    @property
    def patches_per_view(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def n_visual_tokens(self) -> int:
        """N: visual tokens across all views."""
        return self.n_views * self.patches_per_view

    @property
    def patch_pixels(self) -> int:
        return self.patch_size * self.patch_size * self.image_channels

    @property
    def seq_len(self) -> int:
        """N + M + K."""
        return self.n_visual_tokens + self.n_lang_tokens + self.n_action_queries

    @property
    def n_frequencies(self) -> int:
        return self.d_teacher // 16


class ExperimentConfig(BaseModel):
    """Declarative run configuration for experiments-cli."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(default=0, ge=0)
    difficulty: Difficulty = Field(default=Difficulty.MONO_AMBIGUOUS)
    n_train_episodes: int = Field(default=400, ge=1, le=2**32 - 1)
    data_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    iterations: int = Field(default=5000, ge=1)
    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    alpha: float = Field(default=0.5, ge=0.0)
    eval_trials: int = Field(default=100, ge=1)
    eval_every: int = Field(default=500, ge=1)
    lr_schedule: LrSchedule = Field(default=LrSchedule.CONSTANT)
    target_kind: TargetKind = Field(default=TargetKind.GEOMETRY)
    probe_steps: int = Field(default=2000, ge=1)
    probe_lr: float = Field(default=1e-2, gt=0.0)
    model: ModelConfig = Field(default_factory=ModelConfig)

    @model_validator(mode="after")
    def _check_finite(self) -> "ExperimentConfig":
        for name in ("lr", "alpha", "data_fraction", "probe_lr"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        return self

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """Return a validated copy with flat overrides (model keys allowed)."""
        data = self.flat_dict()
        for key, value in overrides.items():
            if key not in data:
                raise ConfigError(f"unknown key: {key}")
            data[key] = value
        return _build_config(data, {})

    def flat_dict(self) -> dict[str, Any]:
        """All fields, model fields inlined, in declaration order."""
        flat: dict[str, Any] = {}
        for name in type(self).model_fields:
            if name == "model":
                continue
            flat[name] = getattr(self, name)
        for name in ModelConfig.model_fields:
            flat[name] = getattr(self.model, name)
        return flat

    def resolved_lines(self) -> list[str]:
        """Render the fully resolved config in the input file format."""
        return [f"{key} = {_render_value(value)}" for key, value in self.flat_dict().items()]


def _render_value(value: Any) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _build_config(flat: dict[str, Any], line_of: dict[str, int], source: str = "") -> ExperimentConfig:
    model_keys = set(ModelConfig.model_fields)
    experiment: dict[str, Any] = {}
    model: dict[str, Any] = {}
    for key, value in flat.items():
        if key in model_keys:
            model[key] = value
        else:
            experiment[key] = value

    try:
        return ExperimentConfig(**experiment, model=ModelConfig(**model))
    except ValidationError as e:
        first = e.errors()[0]
        loc = [str(part) for part in first.get("loc", ()) if str(part) != "model"]
        field = loc[0] if loc else ""
        where = source
        if field in line_of:
            where = f"{source}:{line_of[field]}"
        label = field or "config"
        raise ConfigError(f"{where}: {label}: {first.get('msg', 'invalid value')}") from e


def parse_experiment_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """
    Parse a ``key = value`` configuration text.

    Args:
        text: File contents
        source: Name used in error messages

    Returns:
        Validated ExperimentConfig
    """
    allowed = set(ExperimentConfig.model_fields) - {"model"} | set(ModelConfig.model_fields)
    flat: dict[str, Any] = {}
    line_of: dict[str, int] = {}

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in flat:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        if not value:
            raise ConfigError(f"{source}:{lineno}: empty value for '{key}'")
        flat[key] = value
        line_of[key] = lineno

    return _build_config(flat, line_of, source)


def load_experiment_config(path: Optional[str | Path]) -> ExperimentConfig:
    """Load an experiment config file; ``None`` yields the defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from e
    return parse_experiment_config(text, source=str(path))
