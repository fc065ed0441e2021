"""Finite-difference checks for every differentiable building block."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .blocks import DeconvBlockSpec, FireSpec, deconv_block_forward, fire_forward
from .branches import KeypointTree, pass_messages
from .losses import build_negative_mask, classification_loss, coordinate_loss, pose_loss, visibility_loss
from .tensor import (RunningStats, Tensor, batchnorm2d, conv2d, fully_connected, gradient_check, maxpool2d,
                     transposed_conv2d)

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape).astype(np.float64), requires_grad=True)


def _weighted(out: Tensor, salt: int = 0) -> Tensor:
    # a fixed random linear functional keeps every output element in play
    w = np.random.default_rng([out.size, salt]).normal(size=out.shape)
    return (out * Tensor(w)).sum()


def _cases(rng) -> list[tuple[str, Callable, list[Tensor]]]:
    cases = []

    x, k, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    cases.append(("conv2d", lambda x, k, b: _weighted(conv2d(x, k, b, stride=2, padding=1)), [x, k, b]))

    x, k, b = _t(rng, 2, 3, 3, 3), _t(rng, 3, 2, 4, 4), _t(rng, 2)
    cases.append(("transposed_conv2d",
                  lambda x, k, b: _weighted(transposed_conv2d(x, k, b, stride=2, padding=1)), [x, k, b]))

    # distinct values so the finite step never flips an argmax
    x = Tensor(rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6).astype(np.float64) * 0.1, requires_grad=True)
    cases.append(("maxpool2d", lambda x: _weighted(maxpool2d(x, 2, 2)), [x]))

    x, g, be = _t(rng, 3, 2, 3, 3), _t(rng, 2), _t(rng, 2)
    cases.append(("batchnorm2d", lambda x, g, be: _weighted(
        batchnorm2d(x, g, be, mode="train", running=RunningStats(2, np.float64))), [x, g, be]))

    x, W, b = _t(rng, 3, 5), _t(rng, 4, 5), _t(rng, 4)
    cases.append(("fully_connected", lambda x, W, b: _weighted(fully_connected(x, W, b)), [x, W, b]))

    spec = FireSpec(2, 2, 2, residual=True)
    x = _t(rng, 1, 4, 4, 4)
    fire = [_t(rng, 2, 4, 1, 1), _t(rng, 2), _t(rng, 2, 2, 1, 1), _t(rng, 2), _t(rng, 2, 2, 3, 3), _t(rng, 2)]

    def fire_fn(x, *p):
        names = ("squeeze.w", "squeeze.b", "expand1.w", "expand1.b", "expand3.w", "expand3.b")
        return _weighted(fire_forward(x, spec, dict(zip(names, p))))
    cases.append(("fire", fire_fn, [x, *fire]))

    dspec = DeconvBlockSpec(squeeze_channels=2, up_channels=3)
    x = _t(rng, 1, 2, 3, 3)
    dec = [_t(rng, 2, 3, 4, 4), _t(rng, 3), _t(rng, 2, 3, 1, 1), _t(rng, 2)]

    def deconv_fn(x, *p):
        names = ("up.w", "up.b", "squeeze.w", "squeeze.b")
        return _weighted(deconv_block_forward(x, dspec, dict(zip(names, p))))
    cases.append(("deconv_block", deconv_fn, [x, *dec]))

    tree = KeypointTree(("a", "b", "c"), 0, ((0, 1), (1, 2)))
    stems = [_t(rng, 1, 2, 3, 3) for _ in range(3)]
    kernels = [_t(rng, 2, 2, 3, 3, scale=0.5) for _ in range(2)]
    biases = [_t(rng, 2) for _ in range(2)]

    def msg_fn(*t):
        s, kk, bb = t[:3], t[3:5], t[5:7]
        params = {"down.0.1.w": kk[0], "down.0.1.b": bb[0], "down.1.2.w": kk[1], "down.1.2.b": bb[1]}
        out = pass_messages(list(s), tree, params)
        return _weighted(out[0], 0) + _weighted(out[1], 1) + _weighted(out[2], 2)
    cases.append(("message_passing", msg_fn, [*stems, *kernels, *biases]))

    lab = np.zeros((2, 3, 4, 4))
    lab[:, 2] = 1.0
    for n, (c, r, q) in enumerate([(0, 1, 2), (1, 3, 0)]):
        lab[n, :, r, q] = 0.0
        lab[n, c, r, q] = 1.0
    mask = build_negative_mask(lab, 0.5, 0)
    logits = _t(rng, 2, 3, 4, 4)
    cases.append(("L0_classification", lambda z: classification_loss(z, lab, mask), [logits]))

    y, g = _t(rng, 2, 6), rng.normal(size=(2, 6))
    vis = np.array([[1, 0, 1], [1, 1, 0]], dtype=np.float64)
    cases.append(("L1_coordinates", lambda y: coordinate_loss(y, g, vis), [y]))

    p, gp = _t(rng, 2, 3), rng.normal(size=(2, 3))
    cases.append(("L2_pose", lambda p: pose_loss(p, gp), [p]))

    vp = Tensor(rng.uniform(0.1, 0.9, (2, 3)), requires_grad=True)
    cases.append(("L3_visibility", lambda v: visibility_loss(v, vis), [vp]))
    return cases


def run_gradchecks(seed: int = 0) -> list[CheckResult]:
    """Central-difference check of every op in double precision."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in _cases(rng):
        start = time.perf_counter()
        err = gradient_check(fn, inputs)
        results.append(CheckResult(name, err, time.perf_counter() - start))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'op':<20} {'max_rel_err':>12} {'seconds':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.max_rel_error:>12.3e} {r.seconds:>8.3f}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
