"""Run configuration shared by the training, caching and evaluation commands."""
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2.5e-3
    batch_size: int = 1  # scenes per iteration
    iterations: int = 5000
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.9
    tau_exponent: int = 4
    T_sample: int = 10
    train_dataset: str = "data/train"
    train_split: Optional[str] = None
    eval_dataset: str = "data/test"
    eval_split: Optional[str] = None
    output_dir: str = "runs/ais"
    diffusion_checkpoint: str = "runs/diffusion.aisd"
    prior_cache_dir: str = "runs/prior_cache"
    checkpoint_interval: int = 1000
    log_interval: int = 100
    feature_channels: int = 64
    roi_size: int = 14
    crop_size: int = 32
    box_jitter: float = 0.0
    use_category_condition: bool = True
    use_occluding_condition: bool = True
    diffusion_iterations: int = 1500
    diffusion_batch_size: int = 32
    diffusion_learning_rate: float = 2e-3
    diffusion_base_channels: int = 16
    condition_dropout: float = 0.15
    visible_channel_dropout: float = 0.5
    prior_batch_size: int = 64

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        for name in ("batch_size", "iterations", "checkpoint_interval", "log_interval",
                     "feature_channels", "roi_size", "crop_size", "diffusion_batch_size",
                     "diffusion_base_channels", "prior_batch_size", "T_sample"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.diffusion_iterations < 0:
            raise ConfigError("diffusion_iterations must be >= 0")
        if self.tau_exponent < 0:
            raise ConfigError("tau_exponent must be >= 0")
        if self.optimizer != "sgd":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r} (only 'sgd')")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0 <= self.box_jitter < 0.5:
            raise ConfigError("box_jitter must lie in [0, 0.5)")
        if not 0 <= self.condition_dropout < 1:
            raise ConfigError("condition_dropout must lie in [0, 1)")
        if not 0 <= self.visible_channel_dropout < 1:
            raise ConfigError("visible_channel_dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            default = getattr(cls, key)
            if value is not None and isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{key} must be a boolean")
            elif value is not None and isinstance(default, int):
                if isinstance(value, bool) or int(value) != value:
                    raise ConfigError(f"{key} must be an integer")
                value = int(value)
            elif value is not None and isinstance(default, float):
                value = float(value)
            kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def replace(self, **changes) -> "TrainConfig":
        data = self.to_dict()
        data.update(changes)
        return TrainConfig.from_dict(data)
