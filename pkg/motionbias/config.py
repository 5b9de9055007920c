import yaml
from pathlib import Path
from typing import Optional
from pydantic import BaseModel, ConfigDict, Field

from motionbias.dataset import SplitSpec
from motionbias.motion import MotionConfig, SkullConfig
from motionbias.phantom import PhantomConfig
from motionbias.segmenter import TrainConfig


class PreprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pad_target: Optional[int] = None  # square side after zero padding; None keeps the slice size


class RuntimeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    threads: int = Field(default=1, ge=1)  # corruption and evaluation workers


class DebugConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enable_epoch_logging: bool = True
    enable_kspace_logging: bool = False


class Config(BaseModel):
    model_config = ConfigDict(extra="forbid")

    phantom: PhantomConfig = PhantomConfig()
    skull: SkullConfig = SkullConfig()
    motion: MotionConfig = MotionConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    train: TrainConfig = TrainConfig()
    split: SplitSpec = SplitSpec()
    runtime: RuntimeConfig = RuntimeConfig()
    debug: DebugConfig = DebugConfig()


def load_config(config_path: str = "config.yml") -> Config:
    """Load configuration from a YAML (or JSON) file."""
    path = Path(config_path)

    if not path.exists():
        raise FileNotFoundError(
            f"Config file not found: {config_path}\n"
            "Copy config.example.yml to config.yml and adjust it, or omit --config for defaults."
        )

    with open(path, 'r') as f:
        data = yaml.safe_load(f)

    return Config(**(data or {}))


# Global config instance
_config: Optional[Config] = None


def get_config() -> Config:
    """Get the global config instance; defaults when nothing was loaded."""
    global _config
    if _config is None:
        _config = Config()
    return _config


def set_config(config: Optional[Config]) -> None:
    global _config
    _config = config
