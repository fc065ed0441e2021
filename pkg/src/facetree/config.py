"""Model and training hyperparameters, plus the ``key=value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

SCHEDULES = ("root_to_leaves", "bidirectional")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_size: int = 224
    num_keypoints: int = 21
    width_factor: float = 1.0
    branch_stages: int = 5
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    negative_keep_rate: float = 0.00025
    routing_enabled: bool = True
    message_schedule: str = "root_to_leaves"
    # trunk widths per downsampling stage, before width_factor scaling
    stage_widths: tuple[int, ...] = (16, 32, 32, 64, 64, 128)
    branch_channels: int = 16
    branch_up_channels: int = 16
    head_width: int = 32
    pose_scale: float = 1.0
    batchnorm: bool = True
    loss_normalize: bool = True

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.validate()

    def validate(self) -> None:
        if self.branch_stages < 1:
            raise ConfigError("branch_stages must be >= 1")
        if self.input_size % (2 ** self.branch_stages):
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^{self.branch_stages}")
        if self.num_keypoints < 2:
            raise ConfigError("num_keypoints (L) must be >= 2")
        if len(self.loss_weights) != 4 or any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights must be four nonnegative numbers")
        if not 0 < self.negative_keep_rate <= 1:
            raise ConfigError("negative_keep_rate must lie in (0, 1]")
        if self.message_schedule not in SCHEDULES:
            raise ConfigError(f"message_schedule must be one of {SCHEDULES}")
        if len(self.stage_widths) < self.branch_stages:
            raise ConfigError("stage_widths needs one entry per branch stage")
        if self.width_factor <= 0:
            raise ConfigError("width_factor must be positive")

    @property
    def code_size(self) -> int:
        return self.input_size // 2 ** self.branch_stages

    def width(self, stage: int) -> int:
        return max(4, int(round(self.stage_widths[stage] * self.width_factor)))

    @property
    def code_channels(self) -> int:
        return self.width(self.branch_stages - 1)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """64 px, 5 keypoints, 4 stages: the configuration trained on a CPU."""
        base = dict(input_size=64, num_keypoints=5, branch_stages=4,
                    stage_widths=(16, 24, 32, 48), branch_channels=8,
                    branch_up_channels=8, head_width=32,
                    negative_keep_rate=0.05, pose_scale=30.0,
                    loss_weights=(1.0, 20.0, 0.002, 1.0))
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    learning_rate: float = 1e-3
    momentum: float = 0.9
    pretrain_iterations: int = 5000
    multitask_iterations: int = 5000
    milestones: tuple[float, ...] = (0.6, 0.85)
    gamma: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    log_every: int = 1

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")


def _coerce(value: str, current):
    if isinstance(current, bool):
        low = value.strip().lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(current, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        kind = type(current[0]) if current else float
        return tuple(kind(p) for p in parts)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value.strip()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, model: ModelConfig | None = None,
                      train: TrainConfig | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Parse ``key = value`` lines.  ``#`` starts a comment.

    Keys name either a ModelConfig or a TrainConfig field; a ``train.``
    prefix forces the latter.  The keys ``L`` and ``preset`` are accepted
    as aliases for ``num_keypoints`` and a base preset (``desk`` or ``full``).
    """
    model_kw: dict = {}
    train_kw: dict = {}
    preset = None
    mfields = {f.name: f for f in fields(ModelConfig)}
    tfields = {f.name: f for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            preset = value
            continue
        if key == "L":
            key = "num_keypoints"
        if key.startswith("train."):
            key = key[len("train."):]
            target = "train"
        else:
            target = "model" if key in mfields else "train"
        if target == "model":
            model_kw[key] = value
        elif key in tfields:
            train_kw[key] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if preset not in (None, "desk", "full"):
        raise ConfigError(f"unknown preset {preset!r}")
    base_model = model or (ModelConfig.desk() if preset == "desk" else ModelConfig())
    base_train = train or TrainConfig()
    try:
        mvals = {k: _coerce(v, getattr(base_model, k)) for k, v in model_kw.items()}
        tvals = {k: _coerce(v, getattr(base_train, k)) for k, v in train_kw.items()}
        return (dataclasses.replace(base_model, **mvals),
                dataclasses.replace(base_train, **tvals))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    return parse_config_text(Path(path).read_text())


def format_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = [f"{f.name} = {_format(getattr(model, f.name))}" for f in fields(model)]
    if train is not None:
        lines += [f"train.{f.name} = {_format(getattr(train, f.name))}" for f in fields(train)]
    return "\n".join(lines) + "\n"
