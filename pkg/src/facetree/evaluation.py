"""Decoding, NME / CED / pose metrics and the three evaluation protocols."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import FaceDataset, MeanShape, denormalize_shape, from_fractions
from .heads import VISIBILITY_THRESHOLD
from .model import FaceTreeNet
from .tensor import Tensor, no_grad

PROTOCOLS = ("pifa", "full", "afw")
PIFA_BINS = ((0.0, 30.0), (30.0, 60.0), (60.0, 90.0))
AFW_MIN_SIDE = 150.0
POSE_STEP = 15.0
DEFAULT_THRESHOLDS = tuple(np.round(np.linspace(0.0, 0.15, 31), 6))


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------- decoding

def heatmap_argmax(logits: np.ndarray, num_keypoints: int) -> np.ndarray:
    """(N, L+1, S, S) -> (N, L, 2) as (x, y) = (col, row) of each keypoint's most
    probable pixel, probabilities being the per-pixel softmax over channels."""
    n, _, h, w = logits.shape
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    flat = logp[:, :num_keypoints].reshape(n, num_keypoints, -1).argmax(axis=-1)
    rows, cols = np.divmod(flat, w)
    return np.stack([cols, rows], axis=-1).astype(np.float64)


def decode_keypoints(outputs: dict, mean_shape: MeanShape | None, mode: str, input_size: int,
                     num_keypoints: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Predicted crop-pixel keypoints (N, L, 2) and visibility confidences.

    ``regression`` denormalizes the coordinate head; ``heatmap`` takes the
    per-channel argmax of the response maps.
    """
    if mode == "regression":
        if mean_shape is None:
            raise ValueError("regression decoding needs a mean shape")
        pts = from_fractions(denormalize_shape(outputs["coords"], mean_shape), input_size)
    elif mode == "heatmap":
        pts = outputs["heatmap"] if "heatmap" in outputs else heatmap_argmax(outputs["logits"], num_keypoints)
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    return pts, outputs.get("visibility")


def predict(model: FaceTreeNet, images: np.ndarray, batch_size: int = 32,
            keep_logits: bool = False) -> dict[str, np.ndarray]:
    """Inference-mode forward over ``images`` in fixed-order batches."""
    keys = ["coords", "pose", "visibility", "heatmap"] + (["logits"] if keep_logits else [])
    chunks: dict[str, list] = {k: [] for k in keys}
    with no_grad():
        for start in range(0, len(images), batch_size):
            out = model(Tensor(images[start:start + batch_size]), mode="infer")
            logits = out.logits.data
            chunks["heatmap"].append(heatmap_argmax(logits, model.config.num_keypoints))
            if keep_logits:
                chunks["logits"].append(logits)
            if model.multitask:
                chunks["coords"].append(out.coords.data)
                chunks["pose"].append(out.pose.data)
                chunks["visibility"].append(out.visibility.data)
    if not len(images):
        L, S = model.config.num_keypoints, model.config.input_size
        empty = {"coords": (0, 2 * L), "pose": (0, 3), "visibility": (0, L), "heatmap": (0, L, 2),
                 "logits": (0, L + 1, S, S)}
        return {k: np.zeros(empty[k]) for k in keys if model.multitask or k in ("heatmap", "logits")}
    return {k: np.concatenate(v) for k, v in chunks.items() if v}


# ---------------------------------------------------------------- metrics

def nme(pred, gt, visibility, face_size: float) -> float:
    """Mean euclidean error over annotated landmarks divided by face size (a fraction).

    Returns NaN, with a warning, when no landmark is annotated.
    """
    if face_size <= 0:
        raise ValueError("face_size must be positive")
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    vis = np.asarray(visibility).astype(bool).reshape(-1) & ~np.isnan(gt).any(axis=1)
    if not vis.any():
        warnings.warn("sample has no annotated landmarks; excluded from NME")
        return math.nan
    err = np.sqrt(((pred[vis] - gt[vis]) ** 2).sum(axis=1))
    return float(err.mean() / face_size)


def ced_curve(errors, thresholds=DEFAULT_THRESHOLDS) -> list[tuple[float, float]]:
    """Fraction of samples with error <= t, for each threshold t."""
    e = np.asarray(errors, dtype=np.float64)
    e = e[~np.isnan(e)]
    n = len(e)
    return [(float(t), float((e <= t).sum() / n) if n else 0.0) for t in thresholds]


def round_to_step(angles, step: float = POSE_STEP) -> np.ndarray:
    # half-way cases round away from zero
    a = np.asarray(angles, dtype=np.float64) / step
    return np.sign(a) * np.floor(np.abs(a) + 0.5) * step


def pose_metrics(pred, gt, tolerance: float = POSE_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Per-angle (yaw, pitch, roll) mean absolute error and discretized accuracy.

    Accuracy counts faces whose prediction, rounded to the nearest 15 degrees,
    lies within ``tolerance`` of the ground truth.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    mae = np.abs(pred - gt).mean(axis=0)
    acc = (np.abs(round_to_step(pred) - gt) <= tolerance).mean(axis=0)
    return mae, acc


# ---------------------------------------------------------------- protocols

@dataclass
class EvalReport:
    protocol: str
    per_sample_nme: np.ndarray
    ced: list[tuple[float, float]]
    pose_mae: np.ndarray | None = None
    pose_accuracy: np.ndarray | None = None
    bins: dict[str, float] = field(default_factory=dict)
    mode: str = "regression"
    count: int = 0

    @property
    def mean_nme(self) -> float:
        e = self.per_sample_nme[~np.isnan(self.per_sample_nme)]
        return float(e.mean()) if len(e) else math.nan

    def to_text(self) -> str:
        lines = [f"protocol = {self.protocol}", f"decode_mode = {self.mode}",
                 f"samples = {self.count}", f"mean_nme_percent = {100 * self.mean_nme:.4f}"]
        for name, v in self.bins.items():
            lines.append(f"nme_percent[{name}] = {100 * v:.4f}")
        if self.pose_mae is not None:
            for i, a in enumerate(("yaw", "pitch", "roll")):
                lines.append(f"pose_mae_deg[{a}] = {self.pose_mae[i]:.4f}")
                lines.append(f"pose_accuracy_15deg[{a}] = {self.pose_accuracy[i]:.4f}")
        return "\n".join(lines) + "\n"

    def ced_csv(self) -> str:
        return "threshold,fraction\n" + "".join(f"{t:.6g},{f:.6g}\n" for t, f in self.ced)


def split_indices(n: int, test_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random train/test split, deterministic in ``seed``; both parts sorted."""
    if not 0 <= test_size <= n:
        raise ValueError("test_size out of range")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 31337])).permutation(n)
    return np.sort(perm[test_size:]), np.sort(perm[:test_size])


def yaw_bin(yaw: float) -> str | None:
    a = abs(yaw)
    for lo, hi in PIFA_BINS:
        if lo <= a < hi or (hi == PIFA_BINS[-1][1] and a == hi):
            return f"[{lo:g},{hi:g}]"
    return None


def afw_mask(boxes: np.ndarray) -> np.ndarray:
    """Faces whose box height and width both exceed 150 px."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return (boxes[:, 2] > AFW_MIN_SIDE) & (boxes[:, 3] > AFW_MIN_SIDE)


def per_sample_errors(pred: np.ndarray, data: FaceDataset, score_all: bool = False) -> np.ndarray:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = np.array([
            nme(pred[i], data.points[i],
                np.ones(data.points.shape[1]) if score_all else data.visibility[i],
                data.face_sizes[i])
            for i in range(len(data))])
    skipped = int(np.isnan(out).sum())
    if caught and skipped:
        warnings.warn(f"{skipped} samples had no annotated landmarks and were excluded")
    return out


def run_protocol(model: FaceTreeNet, data: FaceDataset, protocol: str, mean_shape: MeanShape | None,
                 mode: str = "regression", thresholds=DEFAULT_THRESHOLDS, batch_size: int = 32) -> EvalReport:
    """Evaluate ``data`` under one protocol.

    pifa: NME overall and per absolute-yaw bin; needs ground-truth pose.
    full: NME over the whole set.
    afw:  only faces larger than 150 px on both sides; every landmark with
          ground-truth coordinates is scored.
    """
    protocol = protocol.lower()
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if protocol == "pifa" and not data.has_pose:
        raise ProtocolError("protocol pifa needs yaw for every face, but some annotations lack pose")
    if protocol == "afw":
        data = data.subset(np.flatnonzero(afw_mask(data.boxes)))
    outputs = predict(model, data.images, batch_size)
    pred, _ = decode_keypoints(outputs, mean_shape, mode, model.config.input_size, model.config.num_keypoints)
    errors = per_sample_errors(pred, data, score_all=protocol == "afw")
    report = EvalReport(protocol, errors, ced_curve(errors, thresholds), mode=mode, count=len(data))
    if protocol == "pifa":
        labels = [yaw_bin(y) for y in data.poses[:, 0]]
        for lo, hi in PIFA_BINS:
            name = f"[{lo:g},{hi:g}]"
            sel = np.array([lab == name for lab in labels], dtype=bool)
            e = errors[sel & ~np.isnan(errors)]
            report.bins[name] = float(e.mean()) if len(e) else math.nan
    if "pose" in outputs and data.has_pose and len(data):
        report.pose_mae, report.pose_accuracy = pose_metrics(outputs["pose"], data.poses)
    return report
