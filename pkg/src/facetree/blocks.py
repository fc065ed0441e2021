"""Fire modules and expand-then-squeeze deconvolution blocks.

Parameters are plain ``dict[str, Tensor]`` mappings; every block reads the
keys it needs and nothing else, so a block's parameters can be sliced out of
the model's flat parameter table with :func:`subparams`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import Tensor, concat_channels, conv2d, relu, transposed_conv2d

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class FireSpec:
    squeeze_1x1: int
    expand_1x1: int
    expand_3x3: int
    residual: bool = False

    @property
    def out_channels(self) -> int:
        return self.expand_1x1 + self.expand_3x3


@dataclass(frozen=True)
class DeconvBlockSpec:
    squeeze_channels: int
    up_channels: int
    up_kernel: int = 4
    up_stride: int = 2
    up_padding: int = 1

    def out_size(self, size: int) -> int:
        return (size - 1) * self.up_stride - 2 * self.up_padding + self.up_kernel


def subparams(params: Params, prefix: str) -> dict[str, Tensor]:
    prefix = prefix if prefix.endswith(".") else prefix + "."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    """He-style uniform init, bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_conv(rng, cout: int, cin: int, k: int, dtype=np.float32) -> dict[str, Tensor]:
    return {"w": uniform_init(rng, (cout, cin, k, k), cin * k * k, dtype),
            "b": zeros((cout,), dtype)}


def init_fire(rng, cin: int, spec: FireSpec, dtype=np.float32) -> dict[str, Tensor]:
    if spec.residual and cin != spec.out_channels:
        raise ValueError(f"residual fire needs {spec.out_channels} input channels, got {cin}")
    out = {}
    for name, (co, ci, k) in {"squeeze": (spec.squeeze_1x1, cin, 1),
                              "expand1": (spec.expand_1x1, spec.squeeze_1x1, 1),
                              "expand3": (spec.expand_3x3, spec.squeeze_1x1, 3)}.items():
        for key, t in init_conv(rng, co, ci, k, dtype).items():
            out[f"{name}.{key}"] = t
    return out


def init_deconv_block(rng, cin: int, spec: DeconvBlockSpec, dtype=np.float32) -> dict[str, Tensor]:
    k = spec.up_kernel
    # transposed-conv fan-in: each output pixel sees about cin * (k / stride)^2 inputs
    fan = max(1, cin * (k // spec.up_stride) ** 2)
    return {
        "up.w": uniform_init(rng, (cin, spec.up_channels, k, k), fan, dtype),
        "up.b": zeros((spec.up_channels,), dtype),
        "squeeze.w": uniform_init(rng, (spec.squeeze_channels, spec.up_channels, 1, 1), spec.up_channels, dtype),
        "squeeze.b": zeros((spec.squeeze_channels,), dtype),
    }


def fire_forward(x: Tensor, spec: FireSpec, params: Params) -> Tensor:
    """Squeeze with 1x1, expand with parallel 1x1 and 3x3, concatenate.

    With ``spec.residual`` the block input is added to the output.
    """
    cin = x.shape[-3]
    if spec.residual and cin != spec.out_channels:
        raise ValueError(f"residual fire needs {spec.out_channels} input channels, got {cin}")
    if params["squeeze.w"].shape[0] != spec.squeeze_1x1 or \
            params["expand1.w"].shape[0] != spec.expand_1x1 or \
            params["expand3.w"].shape[0] != spec.expand_3x3:
        raise ValueError("fire parameters do not match FireSpec")
    s = relu(conv2d(x, params["squeeze.w"], params["squeeze.b"]))
    e1 = conv2d(s, params["expand1.w"], params["expand1.b"])
    e3 = conv2d(s, params["expand3.w"], params["expand3.b"], padding=1)
    out = relu(concat_channels(e1, e3))
    if spec.residual:
        out = out + x
    return out


def deconv_block_forward(x: Tensor, spec: DeconvBlockSpec, params: Params) -> Tensor:
    """Upsample with a strided transposed conv, then squeeze with a 1x1 conv."""
    if spec.out_size(x.shape[-1]) <= 0:
        raise ValueError(f"deconv block cannot upsample size {x.shape[-1]}")
    up = relu(transposed_conv2d(x, params["up.w"], params["up.b"],
                                stride=spec.up_stride, padding=spec.up_padding))
    return relu(conv2d(up, params["squeeze.w"], params["squeeze.b"]))
