"""SGD with momentum, multistep schedule, the two training phases and checkpoints."""
from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, TextIO

import numpy as np

from .branches import KeypointTree
from .config import ModelConfig, TrainConfig, format_config, parse_config_text
from .data import FaceDataset, MeanShape, build_label_maps, compute_mean_shape, keypoint_names, to_fractions
from .losses import (LOG_HEADER, LossBreakdown, build_negative_mask, classification_loss, coordinate_loss,
                     pose_loss, total_loss, visibility_loss)
from .model import SHARED_PREFIXES, FaceTreeNet
from .tensor import Tensor, backward

CHECKPOINT_MAGIC = b"FACETREE-CKPT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    schedule: list[tuple[int, float]] = field(default_factory=list)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    weight_decay: float = 0.0

    def lr_at(self, iteration: int) -> float:
        mult = 1.0
        for it, m in self.schedule:
            if iteration >= it:
                mult = m
        return self.learning_rate * mult


def multistep_schedule(total_iterations: int, milestones=(0.6, 0.85), gamma: float = 0.1) -> list[tuple[int, float]]:
    """(iteration, cumulative multiplier) pairs at the given fractions of the run."""
    return [(int(round(f * total_iterations)), gamma ** (i + 1)) for i, f in enumerate(milestones)]


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState, iteration: int = 0,
             grads: Mapping[str, np.ndarray] | None = None) -> None:
    """v <- momentum * v - lr * g;  p <- p + v.  Gradients default to ``p.grad``."""
    lr = state.lr_at(iteration)
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        if g is None:
            v *= state.momentum
        else:
            if state.weight_decay:
                g = g + state.weight_decay * p.data
            v *= state.momentum
            v -= lr * g
        p.data += v


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    tree: KeypointTree
    tensors: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    mean_shape: MeanShape | None = None
    iteration: int = 0
    kind: str = "multitask"
    rng_state: dict = field(default_factory=dict)

    def build_model(self) -> FaceTreeNet:
        net = FaceTreeNet(self.model_config, self.tree, multitask=self.kind == "multitask")
        net.load_state_dict(self.tensors)
        return net

    def header(self) -> str:
        meta = {"version": CHECKPOINT_VERSION, "kind": self.kind, "iteration": self.iteration,
                "rng_state": self.rng_state, "keypoints": list(self.tree.names)}
        return (json.dumps(meta, sort_keys=True) + "\n[config]\n"
                + format_config(self.model_config, self.train_config) + "[tree]\n" + self.tree.to_text())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        head = self.header().encode("utf-8")
        buf.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        buf.write(head)
        records = [(k, v) for k, v in self.tensors.items()]
        records += [(f"velocity:{k}", v) for k, v in self.velocity.items()]
        if self.mean_shape is not None:
            records.append(("meta:mean_shape", self.mean_shape.coords))
        buf.write(struct.pack("<I", len(records)))
        for name, arr in records:
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            buf.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        view = memoryview(data)
        n = len(CHECKPOINT_MAGIC)
        if bytes(view[:n]) != CHECKPOINT_MAGIC:
            raise ValueError("not a facetree checkpoint")
        version, hlen = struct.unpack_from("<II", view, n)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = n + 8
        head = bytes(view[pos:pos + hlen]).decode("utf-8")
        pos += hlen
        meta_line, rest = head.split("\n", 1)
        meta = json.loads(meta_line)
        cfg_text, tree_text = rest.split("[config]\n", 1)[1].split("[tree]\n", 1)
        mcfg, tcfg = parse_config_text(cfg_text)
        tree = KeypointTree.from_text(tree_text, meta["keypoints"])
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        tensors, velocity, mean_shape = {}, {}, None
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
            if name.startswith("velocity:"):
                velocity[name[len("velocity:"):]] = arr
            elif name == "meta:mean_shape":
                mean_shape = MeanShape(arr)
            else:
                tensors[name] = arr
        return cls(mcfg, tcfg, tree, tensors, velocity, mean_shape, meta["iteration"], meta["kind"],
                   meta["rng_state"])

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- batches and losses

def batch_indices(n: int, batch_size: int, iteration: int, seed: int) -> np.ndarray:
    """Indices for ``iteration``: consecutive slices of a per-epoch permutation."""
    per_epoch = max(1, n // batch_size)
    epoch, slot = divmod(iteration, per_epoch)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch])).permutation(n)
    return perm[slot * batch_size:(slot + 1) * batch_size]


def mask_seed(seed: int, iteration: int) -> list[int]:
    return [seed, 104729, iteration]


def compute_losses(model: FaceTreeNet, data: FaceDataset, index: np.ndarray, mean_shape: MeanShape | None,
                   weights, seed: int, iteration: int, mode: str = "train") -> LossBreakdown:
    cfg = model.config
    x = Tensor(data.images[index])
    out = model(x, mode)
    labels = build_label_maps(data.points[index], data.visibility[index], cfg, dtype=out.logits.dtype)
    mask = build_negative_mask(labels, cfg.negative_keep_rate, mask_seed(seed, iteration))
    l0 = classification_loss(out.logits, labels, mask, normalize=cfg.loss_normalize)
    if not model.multitask:
        return total_loss((l0, None, None, None), (1.0, 0.0, 0.0, 0.0))
    vis = data.visibility[index]
    target = to_fractions(data.points[index], cfg.input_size).astype(np.float64) - mean_shape.coords
    l1 = coordinate_loss(out.coords, target, vis)
    l2 = pose_loss(out.pose, data.poses[index])
    l3 = visibility_loss(out.visibility, vis)
    return total_loss((l0, l1, l2, l3), weights)


def clip_gradients(params: Mapping[str, Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values()
                         if p.grad is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


class Trainer:
    """Runs SGD iterations on one model; used by both training phases."""

    def __init__(self, model: FaceTreeNet, data: FaceDataset, train: TrainConfig,
                 total_iterations: int, mean_shape: MeanShape | None = None,
                 weights=(1.0, 0.0, 0.0, 0.0), log: TextIO | None = None,
                 callback: Callable[[int, LossBreakdown], None] | None = None):
        self.model = model
        self.data = data
        self.train = train
        self.mean_shape = mean_shape
        self.weights = tuple(weights)
        self.state = OptimizerState(train.learning_rate, train.momentum,
                                    multistep_schedule(total_iterations, train.milestones, train.gamma),
                                    weight_decay=train.weight_decay)
        self.total = total_iterations
        self.iteration = 0
        self.log = log
        self.callback = callback
        self.history: list[tuple[float, ...]] = []
        if log is not None:
            log.write(LOG_HEADER + "\n")

    def step(self) -> LossBreakdown:
        it = self.iteration
        idx = batch_indices(len(self.data), self.train.batch_size, it, self.train.seed)
        self.model.zero_grad()
        losses = compute_losses(self.model, self.data, idx, self.mean_shape, self.weights,
                                self.train.seed, it)
        backward(losses.total)
        params = self.model.trainable()
        if self.train.grad_clip:
            clip_gradients(params, self.train.grad_clip)
        sgd_step(params, self.state, it)
        self.history.append(losses.values())
        if self.log is not None and it % self.train.log_every == 0:
            self.log.write(losses.csv_row(it) + "\n")
        if self.callback is not None:
            self.callback(it, losses)
        self.iteration += 1
        return losses

    def run(self, iterations: int | None = None) -> None:
        for _ in range(self.total - self.iteration if iterations is None else iterations):
            self.step()


def dataset_mean_shape(data: FaceDataset, size: int) -> MeanShape:
    return compute_mean_shape(to_fractions(data.points, size), data.visibility)


def make_checkpoint(model: FaceTreeNet, trainer: Trainer, mcfg: ModelConfig, tcfg: TrainConfig,
                mean_shape: MeanShape | None, kind: str) -> Checkpoint:
    tensors = {k: np.array(v) for k, v in model.state_dict().items()}
    return Checkpoint(mcfg, tcfg, model.tree, tensors,
                      {k: v.copy() for k, v in trainer.state.velocity.items()},
                      mean_shape, trainer.iteration, kind,
                      {"seed": tcfg.seed, "batch_stream": [tcfg.seed, 7919], "mask_stream": [tcfg.seed, 104729]})


def pretrain_classification(data: FaceDataset, mcfg: ModelConfig, tcfg: TrainConfig,
                            tree: KeypointTree | None = None, log: TextIO | None = None,
                            model: FaceTreeNet | None = None) -> Checkpoint:
    """Train encoder + keypoint branches on the classification loss alone."""
    model = model or FaceTreeNet(mcfg, tree, seed=tcfg.seed, multitask=False)
    trainer = Trainer(model, data, tcfg, tcfg.pretrain_iterations, log=log)
    trainer.run()
    return make_checkpoint(model, trainer, mcfg, tcfg, None, "pretrain")


def init_multitask(init: Checkpoint | None, mcfg: ModelConfig, seed: int,
                   tree: KeypointTree | None = None) -> FaceTreeNet:
    """Fresh multitask network whose shared encoder/branch weights come from ``init``."""
    model = FaceTreeNet(mcfg, tree or (init.tree if init else None), seed=seed, multitask=True)
    if init is not None:
        shared = {k: v for k, v in init.tensors.items()
                  if k.startswith(SHARED_PREFIXES + tuple("stats:" + p for p in SHARED_PREFIXES))}
        model.load_state_dict(shared)
    return model


def train_multitask(data: FaceDataset, mcfg: ModelConfig, tcfg: TrainConfig, init: Checkpoint | None,
                    log: TextIO | None = None, model: FaceTreeNet | None = None,
                    mean_shape: MeanShape | None = None) -> Checkpoint:
    """Optimize the weighted sum of all four losses over every parameter."""
    model = model or init_multitask(init, mcfg, tcfg.seed)
    mean_shape = mean_shape or dataset_mean_shape(data, mcfg.input_size)
    trainer = Trainer(model, data, tcfg, tcfg.multitask_iterations, mean_shape, mcfg.loss_weights, log)
    trainer.run()
    return make_checkpoint(model, trainer, mcfg, tcfg, mean_shape, "multitask")
