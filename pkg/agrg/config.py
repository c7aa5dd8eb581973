# agrg/config.py

"""
Run configuration models and loading logic.
We use Pydantic for validation and pydantic-settings for the AGRG_* environment.

Precedence: model defaults < JSON config file < environment (AGRG_SEED, AGRG_THREADS)
< command-line flags. The canonical JSON form of a config (without paths, thread
count and decoder variant) is hashed and stamped on every artifact.
"""

import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import orjson
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from agrg.core.encoder import EncoderConfig, EncoderKind
from agrg.core.generation_task import VariantConfig
from agrg.core.heads import HeadsConfig
from agrg.core.textgen import DecoderConfig
from agrg.errors import ConfigError
from agrg.ingestion.synth import CHEST_CT_LABELS, DatasetConfig

load_dotenv()

logger = logging.getLogger(__name__)

# --- Environment Configuration ---

class EnvSettings(BaseSettings):
    """AGRG_* environment variables (and a local .env file)."""
    model_config = SettingsConfigDict(env_prefix="AGRG_", env_file=".env", extra="ignore")

    seed: Optional[int] = None
    threads: Optional[int] = None
    log_level: str = "INFO"

# --- Model Definitions (Pydantic) ---

class StageConfig(BaseModel):
    """
    Optimizer schedule of one training stage.
    """
    lr: float = Field(ge=0.0)
    batch_size: int = Field(ge=1)
    epochs: int = Field(ge=0)
    weight_decay: float = Field(0.0, ge=0.0)
    head_lr: Optional[float] = Field(None, ge=0.0)


class TrainingConfig(BaseModel):
    pretrain: StageConfig = Field(default_factory=lambda: StageConfig(lr=1e-4, batch_size=4, epochs=10))
    heads: StageConfig = Field(default_factory=lambda: StageConfig(lr=1e-5, head_lr=1e-3, batch_size=4, epochs=3))
    decoder: StageConfig = Field(default_factory=lambda: StageConfig(lr=1e-3, batch_size=64, epochs=30, weight_decay=0.01))


class AblationConfig(BaseModel):
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    # empty: only the configured encoder kind
    encoders: List[EncoderKind] = Field(default_factory=list)


class PathsConfig(BaseModel):
    data_dir: Path = Path("data")
    out_dir: Path = Path("runs")


class RunConfig(BaseModel):
    """
    Everything one experiment needs; the source of truth for every stage.
    """
    seed: int = 0
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    heads: HeadsConfig = Field(default_factory=HeadsConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    variant: VariantConfig = Field(default_factory=VariantConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def check_dimensions(self) -> "RunConfig":
        patch = self.encoder.patch
        if any(extent % patch for extent in self.dataset.shape):
            raise ValueError(f"volume shape {self.dataset.shape} is not divisible by patch size {patch}")
        if self.encoder.d_h % 2:
            raise ValueError(f"d_h must be even, got {self.encoder.d_h}")
        if self.dataset.k > len(CHEST_CT_LABELS):
            raise ValueError(f"K={self.dataset.k} exceeds the {len(CHEST_CT_LABELS)} known labels")
        return self

    # --- canonical form & hash ---

    def canonical_json(self) -> bytes:
        payload = self.model_dump(mode="json", exclude={"paths", "threads", "variant"})
        return orjson.dumps(payload, option=orjson.OPT_SORT_KEYS)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json()).hexdigest()

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as error:
            raise ConfigError(f"invalid run configuration: {error}") from error

    def updated(self, **sections: Any) -> "RunConfig":
        """A validated copy with top-level fields or nested dicts merged in."""
        data = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = _deep_merge(data[key], value)
            else:
                data[key] = value
        return RunConfig.from_dict(data)


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged

# --- Loading ---

def load_run_config(path: Optional[Union[str, Path]] = None, env: Optional[EnvSettings] = None) -> RunConfig:
    """Defaults, then the JSON file (if any), then AGRG_* environment overrides."""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = orjson.loads(path.read_bytes())
        except orjson.JSONDecodeError as error:
            raise ConfigError(f"config file {path} is not valid JSON") from error
    env = env or EnvSettings()
    if env.seed is not None:
        data["seed"] = env.seed
    if env.threads is not None:
        data["threads"] = env.threads
    config = RunConfig.from_dict(data)
    logger.debug(f"[Config] loaded config {config.config_hash()[:12]} (seed={config.seed})")
    return config
