"""
Configuration Management
Centralized, validated configuration for the reconstruction pipeline
"""

import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Load environment variables
load_dotenv()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class MatchingConfig(_Section):
    """Plane-sweep matching configuration"""
    d_near: float = Field(0.25, gt=0)
    d_far: float = Field(8.0, gt=0)
    num_planes: int = Field(64, ge=2)
    plane_spacing: Literal["uniform", "inverse"] = "inverse"
    temperature: float = Field(0.05, gt=0)
    num_neighbors: int = Field(2, ge=1)
    rotation_weight: float = Field(0.5, ge=0)  # metres per radian
    aggregation_kernel: int = Field(3, ge=1)
    mask_unmatched: bool = True

    @model_validator(mode="after")
    def _check_range(self):
        if self.d_near >= self.d_far:
            raise ValueError(f"d_near ({self.d_near}) must be below d_far ({self.d_far})")
        return self


class LiftingConfig(_Section):
    """View lifting and decoding configuration"""
    stride: int = 2
    base_scale_px: float = Field(1.5, gt=0)
    initial_opacity: float = Field(0.9, gt=0, lt=1)
    gt_confidence: float = Field(0.99, gt=0, lt=1)
    use_gt_depth: bool = False

    @field_validator("stride")
    @classmethod
    def _check_stride(cls, value: int) -> int:
        if value not in (1, 2, 4):
            raise ValueError(f"stride must be 1, 2 or 4, got {value}")
        return value


class PTFConfig(_Section):
    """Pixel-wise triplet fusion configuration"""
    enable_fusion: bool = True
    broader_fusion: bool = True
    ptf_delta: float = Field(0.1, gt=0)


class WFRConfig(_Section):
    """Weighted floater removal configuration"""
    enable_wfr: bool = True
    wfr_delta: float = Field(0.1, gt=0)
    wfr_strategy: Literal["neighbor_accumulate", "no_accumulate", "uniform", "direct_removal"] = (
        "neighbor_accumulate"
    )
    wfr_epsilon_floor: float = Field(0.01, gt=0, le=1)


class RendererConfig(_Section):
    """Rasterizer configuration"""
    tile_size: int = 16
    near_plane: float = Field(0.05, gt=0)

    @field_validator("tile_size")
    @classmethod
    def _check_tile(cls, value: int) -> int:
        if value not in (8, 16, 32):
            raise ValueError(f"tile_size must be 8, 16 or 32, got {value}")
        return value


class FinetuneConfig(_Section):
    """Depth-regularized fine-tuning configuration"""
    iters: int = Field(0, ge=0)
    lambda_ssim: float = Field(0.2, ge=0, lt=1)
    lambda_depth: float = Field(0.1, ge=0)
    use_ssim_loss: bool = False
    lr_means: float = Field(1.6e-4, ge=0)  # multiplied by the scene extent
    lr_log_scales: float = Field(5e-3, ge=0)
    lr_opacity: float = Field(5e-2, ge=0)
    lr_colors: float = Field(2.5e-3, ge=0)
    view_sampling: Literal["roundrobin", "random"] = "roundrobin"
    training_views: Literal["input", "all"] = "input"
    divergence_factor: float = Field(10.0, gt=1)
    checkpoint_every: int = Field(0, ge=0)


class RuntimeConfig(_Section):
    """Process-level settings"""
    threads: int = Field(1, ge=1)
    seed: int = 0
    log_level: str = "INFO"
    depth_format: Literal["png", "pfm"] = "pfm"

    @field_validator("log_level")
    @classmethod
    def _check_level(cls, value: str) -> str:
        level = value.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"unknown log level '{value}'")
        return level

    @classmethod
    def from_env(cls):
        return cls(
            threads=int(os.getenv("SPLATFUSE_THREADS", "1")),
            seed=int(os.getenv("SPLATFUSE_SEED", "0")),
            log_level=os.getenv("SPLATFUSE_LOG_LEVEL", "INFO"),
        )


class PipelineConfig(_Section):
    """Complete pipeline configuration (every ablation row is one instance of this)"""
    matching: MatchingConfig = Field(default_factory=MatchingConfig)
    lifting: LiftingConfig = Field(default_factory=LiftingConfig)
    ptf: PTFConfig = Field(default_factory=PTFConfig)
    wfr: WFRConfig = Field(default_factory=WFRConfig)
    renderer: RendererConfig = Field(default_factory=RendererConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig.from_env)
    manifest: Optional[str] = None
    output_dir: str = "./output"

    def with_overrides(self, overrides: Dict[str, Any]) -> "PipelineConfig":
        """
        Return a validated copy with dotted-key overrides applied

        Args:
            overrides: Mapping like {"wfr.wfr_strategy": "uniform", "lifting.stride": 1}

        Returns:
            New configuration
        """
        data = self.model_dump()
        for key, value in overrides.items():
            _set_dotted(data, key, value)
        return build_config(data)


_RUNTIME_ENV = {
    "threads": "SPLATFUSE_THREADS",
    "seed": "SPLATFUSE_SEED",
    "log_level": "SPLATFUSE_LOG_LEVEL",
}


def _set_dotted(data: Dict[str, Any], key: str, value: Any):
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"Unknown config section '{part}' in '{key}'")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"Unknown config key '{key}'")
    node[parts[-1]] = value


def build_config(data: Dict[str, Any]) -> PipelineConfig:
    """Validate a raw mapping, turning pydantic errors into ConfigError"""
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def read_config_file(path: str) -> Dict[str, Any]:
    """
    Read a TOML or YAML config file

    Args:
        path: Path ending in .toml, .yaml or .yml

    Returns:
        Raw mapping
    """
    file_path = Path(path)
    if not file_path.exists():
        raise ConfigError(f"Config file not found: {path}")

    suffix = file_path.suffix.lower()
    try:
        if suffix == ".toml":
            with open(file_path, "rb") as f:
                return tomllib.load(f)
        if suffix in (".yaml", ".yml"):
            with open(file_path, "r") as f:
                return yaml.safe_load(f) or {}
    except (tomllib.TOMLDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot parse config file {path}: {e}") from e

    raise ConfigError(f"Unsupported config format: {suffix}")


def parse_override(text: str) -> tuple:
    """Split 'section.key=value' and parse value as a YAML scalar"""
    if "=" not in text:
        raise ConfigError(f"Override must look like section.key=value, got '{text}'")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(
    path: Optional[str] = None,
    overrides: Optional[List[str]] = None,
) -> PipelineConfig:
    """
    Load configuration: defaults -> file -> environment -> overrides

    Args:
        path: Optional TOML/YAML file
        overrides: Optional list of "section.key=value" strings

    Returns:
        Validated pipeline configuration
    """
    data: Dict[str, Any] = read_config_file(path) if path else {}
    runtime = dict(data.get("runtime", {}))
    for key, env_name in _RUNTIME_ENV.items():
        if os.getenv(env_name) is not None:
            runtime[key] = os.getenv(env_name)
    data["runtime"] = runtime

    config = build_config(data)
    if overrides:
        config = config.with_overrides(dict(parse_override(item) for item in overrides))
    return config
