"""Shape regression and visibility heads on top of the response maps."""
from __future__ import annotations

import numpy as np

from .backbone import bn, fire_spec_for, init_bn
from .blocks import Params, fire_forward, init_conv, init_fire, subparams, zeros
from .config import ModelConfig
from .tensor import RunningStats, Tensor, clamp, concat_channels, conv2d, fully_connected, maxpool2d, relu

VISIBILITY_THRESHOLD = 0.5


def head_specs(config: ModelConfig):
    w = config.head_width
    return [fire_spec_for(w, w) for _ in range(1, config.branch_stages)]


def init_head(rng, config: ModelConfig, out_dim: int) -> tuple[dict[str, Tensor], dict[str, RunningStats]]:
    w = config.head_width
    params = {f"stem.{k}": v for k, v in init_conv(rng, w, config.num_keypoints + 1, 3).items()}
    for i, spec in enumerate(head_specs(config), 1):
        params.update({f"fire{i}.{k}": v for k, v in init_fire(rng, w, spec).items()})
    stats = {}
    if config.batchnorm:
        for name in ["bn"] + [f"fire{i}.bn" for i in range(1, config.branch_stages)]:
            params.update(init_bn(w, name))
            stats[name] = RunningStats(w, np.float32)
    fan = (w + config.code_channels) * config.code_size ** 2
    params["fc.w"] = zeros((out_dim, fan))        # outputs start at the mean shape
    params["fc.b"] = zeros((out_dim,))
    return params, stats


def head_forward(maps: Tensor, code: Tensor, params: Params, config: ModelConfig,
                 stats: dict | None = None, mode: str = "train") -> Tensor:
    """Fire trunk down to code resolution, concat the image code, fully connected out."""
    h = conv2d(maps, params["stem.w"], params["stem.b"], stride=2, padding=1)
    if config.batchnorm:
        h = bn(h, params, stats, "bn", mode)
    h = relu(h)
    for i, spec in enumerate(head_specs(config), 1):
        h = fire_forward(h, spec, subparams(params, f"fire{i}"))
        if config.batchnorm:
            h = bn(h, params, stats, f"fire{i}.bn", mode)
        h = maxpool2d(h, 2, 2)
    h = concat_channels(h, code)
    flat = h.reshape(h.shape[0], -1)
    # 1/sqrt(fan-in) keeps the wide output layer trainable at the trunk's learning rate
    return fully_connected(flat * flat.shape[1] ** -0.5, params["fc.w"], params["fc.b"])


def regress_coordinates(maps: Tensor, code: Tensor, params: Params, config: ModelConfig,
                        stats: dict | None = None, mode: str = "train") -> Tensor:
    """Mean-shape-normalized coordinates, (N, 2L) as x0, y0, x1, y1, ..."""
    return head_forward(maps, code, params, config, stats, mode)


def predict_visibility(maps: Tensor, code: Tensor, params: Params, config: ModelConfig,
                       stats: dict | None = None, mode: str = "train") -> Tensor:
    """Per-keypoint visibility confidence clamped to [0, 1], (N, L)."""
    return clamp(head_forward(maps, code, params, config, stats, mode), 0.0, 1.0)


def visible(confidence, threshold: float = VISIBILITY_THRESHOLD):
    """Binary decision from a confidence array; never modifies the input."""
    return confidence >= threshold
