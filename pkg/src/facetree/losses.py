"""Classification, coordinate, pose and visibility losses and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, log_softmax

LOG_HEADER = "iteration,L0,L1,L2,L3,total"


def _as_array(x, dtype) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=dtype)


def build_negative_mask(labelmap, keep_rate: float, rng_seed) -> np.ndarray:
    """Keep every keypoint pixel and a random ``keep_rate`` fraction of background pixels.

    ``labelmap`` is one-hot (..., L+1, H, W) with background last; the mask
    has the labelmap's shape without the class axis.
    """
    if not 0 < keep_rate <= 1:
        raise ValueError("keep_rate must lie in (0, 1]")
    lab = _as_array(labelmap, np.float32)
    positive = lab[..., :-1, :, :].sum(axis=-3) > 0
    rng = np.random.default_rng(rng_seed)
    keep = rng.random(positive.shape) < keep_rate
    return (positive | keep).astype(lab.dtype)


def _check_one_hot(lab: np.ndarray) -> None:
    if not np.all((lab == 0) | (lab == 1)) or not np.all(lab.sum(axis=-3) == 1):
        raise ValueError("labelmap must be one-hot along the class axis")


def classification_loss(logits: Tensor, labelmap, mask, normalize: bool = True) -> Tensor:
    """Masked per-pixel softmax cross-entropy over the class axis (-3).

    With ``normalize`` the masked sum is divided by the number of kept
    pixels; otherwise the raw sum is returned.
    """
    lab = _as_array(labelmap, logits.dtype).astype(logits.dtype, copy=False)
    m = _as_array(mask, logits.dtype).astype(logits.dtype, copy=False)
    if lab.shape != logits.shape:
        raise ValueError(f"labelmap shape {lab.shape} != logits shape {logits.shape}")
    if m.shape != lab.shape[:-3] + lab.shape[-2:]:
        raise ValueError(f"mask shape {m.shape} does not match labelmap {lab.shape}")
    _check_one_hot(lab)
    # fold the mask into the label weights: one multiply on the graph
    weight = lab * np.expand_dims(m, -3)
    if normalize:
        weight = weight / max(1.0, float(m.sum()))
    return -(log_softmax(logits, axis=-3) * Tensor(weight)).sum()


def _batch_mean(per_sample: Tensor) -> Tensor:
    return per_sample if per_sample.ndim == 0 else per_sample.mean()


def coordinate_loss(y: Tensor, g, v) -> Tensor:
    """Sum over keypoints of v_i * squared euclidean error; mean over the batch.

    ``y`` and ``g`` interleave x, y per keypoint (length 2L); NaN ground truth
    is allowed where v is 0.
    """
    g = np.asarray(g, dtype=y.dtype)
    v = np.asarray(v, dtype=y.dtype)
    if g.shape != y.shape or v.shape[-1] * 2 != y.shape[-1]:
        raise ValueError(f"coordinate_loss shapes: y {y.shape}, g {g.shape}, v {v.shape}")
    weight = np.repeat(v, 2, axis=-1)
    target = np.where(weight > 0, np.nan_to_num(g), 0.0).astype(y.dtype)
    diff = y - Tensor(target)
    return _batch_mean((diff * diff * Tensor(weight)).sum(axis=-1))


def pose_loss(p: Tensor, g) -> Tensor:
    """Sum of squared yaw/pitch/roll differences; mean over the batch."""
    g = np.asarray(g, dtype=p.dtype)
    if g.shape != p.shape or p.shape[-1] != 3:
        raise ValueError(f"pose_loss shapes: {p.shape} vs {g.shape}")
    diff = p - Tensor(g)
    return _batch_mean((diff * diff).sum(axis=-1))


def visibility_loss(vp: Tensor, vg) -> Tensor:
    vg = np.asarray(vg, dtype=vp.dtype)
    if vg.shape != vp.shape:
        raise ValueError(f"visibility_loss shapes: {vp.shape} vs {vg.shape}")
    diff = vp - Tensor(vg)
    return _batch_mean((diff * diff).sum(axis=-1))


@dataclass
class LossBreakdown:
    L0: Tensor
    L1: Tensor
    L2: Tensor
    L3: Tensor
    total: Tensor

    def values(self) -> tuple[float, float, float, float, float]:
        return tuple(t.item() for t in (self.L0, self.L1, self.L2, self.L3, self.total))

    def csv_row(self, iteration: int) -> str:
        return f"{iteration}," + ",".join(f"{v:.9g}" for v in self.values())


def total_loss(components, weights) -> LossBreakdown:
    """``components`` is (L0, L1, L2, L3); missing terms may be None and count as 0."""
    if len(components) != 4 or len(weights) != 4:
        raise ValueError("total_loss needs four components and four weights")
    parts = []
    total = None
    for comp, w in zip(components, weights):
        t = comp if comp is not None else Tensor(np.zeros((), dtype=np.float32))
        parts.append(t)
        term = t * float(w)
        total = term if total is None else total + term
    return LossBreakdown(*parts, total=total)
