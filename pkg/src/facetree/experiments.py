"""Desk-scale experiments on synthetic faces: end-to-end training and the message-passing ablation."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import synthetic_dataset
from .evaluation import run_protocol
from .training import Trainer, make_checkpoint, dataset_mean_shape, init_multitask
from .model import FaceTreeNet

# held-out faces are drawn from a different base seed than any training set
TEST_SEED_OFFSET = 10_000


@dataclass
class DeskSettings:
    train_size: int = 2000
    test_size: int = 200
    pretrain_iterations: int = 300
    multitask_iterations: int = 2000
    learning_rate: float = 0.01
    batch_size: int = 16


@dataclass
class DeskResult:
    seed: int
    message_passing: bool
    mean_nme: float
    heatmap_nme: float
    pose_mae: np.ndarray
    seconds: float

    def line(self) -> str:
        mae = ", ".join(f"{v:.2f}" for v in self.pose_mae)
        return (f"seed={self.seed} messages={'on' if self.message_passing else 'off'} "
                f"nme={100 * self.mean_nme:.2f}% heatmap_nme={100 * self.heatmap_nme:.2f}% "
                f"pose_mae=({mae}) deg time={self.seconds:.0f}s")


def run_desk(seed: int = 0, settings: DeskSettings | None = None, message_passing: bool = True,
             config: ModelConfig | None = None,
             progress: Callable[[str, int, tuple], None] | None = None) -> DeskResult:
    """Pretrain, hand off, train multitask, then score the held-out faces."""
    s = settings or DeskSettings()
    cfg = config or ModelConfig.desk()
    t0 = time.perf_counter()
    train = synthetic_dataset(s.train_size, cfg, seed)
    test = synthetic_dataset(s.test_size, cfg, seed + TEST_SEED_OFFSET)
    tc = TrainConfig(seed=seed, batch_size=s.batch_size, learning_rate=s.learning_rate,
                     pretrain_iterations=s.pretrain_iterations, multitask_iterations=s.multitask_iterations)

    def hook(phase):
        if progress is None:
            return None
        return lambda it, losses: progress(phase, it, losses.values())

    pre = FaceTreeNet(cfg, seed=seed, multitask=False)
    if not message_passing:
        pre.freeze_messages()
    trainer = Trainer(pre, train, tc, s.pretrain_iterations, callback=hook("pretrain"))
    trainer.run()
    ckpt = make_checkpoint(pre, trainer, cfg, tc, None, "pretrain")

    mean_shape = dataset_mean_shape(train, cfg.input_size)
    model = init_multitask(ckpt, cfg, seed)
    if not message_passing:
        model.freeze_messages()
    Trainer(model, train, tc, s.multitask_iterations, mean_shape, cfg.loss_weights,
            callback=hook("multitask")).run()

    reg = run_protocol(model, test, "full", mean_shape)
    heat = run_protocol(model, test, "full", mean_shape, mode="heatmap")
    return DeskResult(seed, message_passing, reg.mean_nme, heat.mean_nme, reg.pose_mae,
                      time.perf_counter() - t0)


def run_ablation(seeds=(0, 1, 2), settings: DeskSettings | None = None,
                 progress: Callable[[DeskResult], None] | None = None) -> list[tuple[DeskResult, DeskResult]]:
    """(full, messages-off) result pairs, one per seed, on identical data and schedules."""
    pairs = []
    for seed in seeds:
        pair = []
        for enabled in (True, False):
            r = run_desk(seed, settings, message_passing=enabled)
            if progress is not None:
                progress(r)
            pair.append(r)
        pairs.append(tuple(pair))
    return pairs


ABLATION_SETTINGS = dataclasses.replace(DeskSettings(), train_size=1000, test_size=200,
                                        pretrain_iterations=200, multitask_iterations=800)
