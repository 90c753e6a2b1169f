"""Run configuration: one flat key/value document merged with command-line flags."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml

from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Unreadable config file, unknown key or invalid value."""


@dataclass
class RunConfig:
    # dataset
    n_videos: int = 14
    n_train: int = 8
    n_val: int = 2
    n_test: int = 4
    n_frames: int = 30
    frame_height: int = 64
    frame_width: int = 96
    n_tools: int = 2
    # model
    width_factor: float = 0.0625
    dual_input: bool = True
    binarize_threshold: float = 0.3
    # optimizer / loop
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    max_steps: int = 500
    val_every: int = 50
    # evaluation
    eval_split: str = "test"
    smoke: bool = False
    # gradient suite
    tol: float = 1e-4
    model_tol: float = 1e-3
    n_seeds: int = 10
    # shared
    seed: int = 0
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    out: Optional[str] = None

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            kind = f.type if isinstance(f.type, str) else f.type.__name__
            if value is None:
                if not kind.startswith("Optional"):
                    raise ConfigError(f"{f.name} must not be null")
                continue
            if kind == "int" and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}")
            if kind == "float":
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{f.name} must be a number, got {value!r}")
                setattr(self, f.name, float(value))
            if kind == "bool" and not isinstance(value, bool):
                raise ConfigError(f"{f.name} must be true or false, got {value!r}")
            if kind in ("str", "Optional[str]") and not isinstance(value, str):
                raise ConfigError(f"{f.name} must be a string, got {value!r}")
        if self.n_train + self.n_val + self.n_test != self.n_videos:
            raise ConfigError(f"n_train + n_val + n_test = {self.n_train + self.n_val + self.n_test} "
                              f"!= n_videos = {self.n_videos}")
        if min(self.n_frames, self.frame_height, self.frame_width, self.n_tools) < 1:
            raise ConfigError("n_frames, frame size and n_tools must be positive")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError(f"eval_split must be train, val or test, got {self.eval_split!r}")
        try:
            self.model_config()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def split(self) -> Tuple[int, int, int]:
        return (self.n_train, self.n_val, self.n_test)

    @property
    def frame_hw(self) -> Tuple[int, int]:
        return (self.frame_height, self.frame_width)

    def model_config(self) -> ModelConfig:
        return ModelConfig(width_factor=self.width_factor, input_hw=self.frame_hw,
                           dual_input=self.dual_input, binarize_threshold=self.binarize_threshold)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
                           batch_size=self.batch_size, max_steps=self.max_steps, val_every=self.val_every,
                           seed=self.seed, binarize_threshold=self.binarize_threshold)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**values)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse a flat YAML mapping of scalars."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a key/value mapping")
    nested = [k for k, v in doc.items() if isinstance(v, (dict, list))]
    if nested:
        raise ConfigError(f"{path}: config must be flat; nested value for {', '.join(map(str, nested))}")
    return doc


def load_run_config(path: Union[str, Path, None] = None, overrides: Optional[Mapping[str, Any]] = None,
                    base: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then ``base``, then the config file, then non-None ``overrides``."""
    values: Dict[str, Any] = dict(base or {})
    if path is not None:
        values.update(read_config_file(path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_mapping(values)
