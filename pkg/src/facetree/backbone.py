"""Image encoder, parallel pose network and the pose-to-code routing function."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import FireSpec, Params, fire_forward, init_conv, init_fire, subparams, zeros
from .config import ModelConfig
from .tensor import RunningStats, Tensor, batchnorm2d, conv2d, fully_connected, maxpool2d, relu


@dataclass(frozen=True)
class PoseTriple:
    yaw: float
    pitch: float
    roll: float

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll], dtype=np.float64)


def fire_spec_for(cin: int, width: int) -> FireSpec:
    squeeze = max(4, width // 4)
    return FireSpec(squeeze, width // 2, width - width // 2, residual=cin == width)


def trunk_specs(config: ModelConfig) -> list[tuple[int, FireSpec]]:
    """(input channels, spec) for each fire stage after the stem."""
    specs = []
    cin = config.width(0)
    for stage in range(1, config.branch_stages):
        spec = fire_spec_for(cin, config.width(stage))
        specs.append((cin, spec))
        cin = spec.out_channels
    return specs


def init_trunk(rng, config: ModelConfig, in_channels: int = 3) -> tuple[dict, dict]:
    params = {f"stem.{k}": v for k, v in init_conv(rng, config.width(0), in_channels, 3).items()}
    params.update(init_bn(config.width(0), "bn"))
    stats = {"bn": RunningStats(config.width(0), np.float32)}
    for i, (cin, spec) in enumerate(trunk_specs(config), 1):
        params.update({f"fire{i}.{k}": v for k, v in init_fire(rng, cin, spec).items()})
        if config.batchnorm:
            params.update(init_bn(spec.out_channels, f"fire{i}.bn"))
            stats[f"fire{i}.bn"] = RunningStats(spec.out_channels, np.float32)
    return params, stats


def init_bn(channels: int, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.gamma": Tensor(np.ones(channels, np.float32), requires_grad=True),
            f"{prefix}.beta": zeros((channels,))}


def bn(h: Tensor, params: Params, stats: dict, name: str, mode: str) -> Tensor:
    return batchnorm2d(h, params[f"{name}.gamma"], params[f"{name}.beta"], mode=mode, running=stats[name])


def trunk_forward(x: Tensor, params: Params, stats: dict, config: ModelConfig, mode: str) -> Tensor:
    """Stride-2 stem conv, then one fire module + 2x2 max pool per remaining stage."""
    h = conv2d(x, params["stem.w"], params["stem.b"], stride=2, padding=1)
    h = relu(bn(h, params, stats, "bn", mode))
    for i, (_, spec) in enumerate(trunk_specs(config), 1):
        h = fire_forward(h, spec, subparams(params, f"fire{i}"))
        if config.batchnorm:
            h = bn(h, params, stats, f"fire{i}.bn", mode)
        h = maxpool2d(h, 2, 2)
    return h


def _check_input(x: Tensor, config: ModelConfig) -> None:
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != config.input_size or x.shape[3] != config.input_size:
        raise ValueError(
            f"expected input (N, 3, {config.input_size}, {config.input_size}), got {x.shape}")


def encode_image(x: Tensor, params: Params, stats: dict, config: ModelConfig, mode: str = "train") -> Tensor:
    """The image code: shared features at input_size / 2^branch_stages resolution."""
    _check_input(x, config)
    return trunk_forward(x, params, stats, config, mode)


def init_pose(rng, config: ModelConfig) -> tuple[dict, dict]:
    params, stats = init_trunk(rng, config)
    c, s = config.code_channels, config.code_size
    params["fc.w"] = zeros((3, c * s * s))        # start at the frontal pose
    params["fc.b"] = zeros((3,))
    return params, stats


def pose_forward(x: Tensor, params: Params, stats: dict, config: ModelConfig,
                 mode: str = "train") -> tuple[Tensor, Tensor]:
    """Returns (pose in degrees (N, 3), deepest pooled pose feature map)."""
    _check_input(x, config)
    pose_code = trunk_forward(x, params, stats, config, mode)
    flat = pose_code.reshape(pose_code.shape[0], -1)
    flat = flat * flat.shape[1] ** -0.5
    pose = fully_connected(flat, params["fc.w"], params["fc.b"]) * config.pose_scale
    return pose, pose_code


def init_routing(config: ModelConfig) -> dict:
    # zero init: the multitask model starts out computing exactly the pretrained code
    c = config.code_channels
    return {"w": zeros((c, c, 3, 3)), "b": zeros((c,))}


def apply_routing(code: Tensor, pose_code: Tensor, params: Params, enabled: bool = True) -> Tensor:
    """code + relu(conv3x3(pose_code)); identity when disabled."""
    if not enabled:
        return code
    if code.shape[-2:] != pose_code.shape[-2:]:
        raise ValueError(f"routing: spatial mismatch {code.shape} vs {pose_code.shape}")
    w = params["w"]
    if w.shape[0] != code.shape[-3] or w.shape[1] != pose_code.shape[-3]:
        raise ValueError(f"routing kernel {w.shape} does not map {pose_code.shape[-3]} "
                         f"pose channels to {code.shape[-3]} code channels")
    return code + relu(conv2d(pose_code, w, params["b"], padding=1))
