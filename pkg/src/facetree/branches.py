"""Per-keypoint deconvolution branches and tree-structured message passing."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import bn, init_bn
from .blocks import DeconvBlockSpec, Params, deconv_block_forward, init_conv, init_deconv_block, subparams, zeros
from .config import ModelConfig
from .tensor import RunningStats, Tensor, concat, conv2d, relu

AFLW21 = (
    "LeftBrowLeftCorner", "LeftBrowCenter", "LeftBrowRightCorner",
    "RightBrowLeftCorner", "RightBrowCenter", "RightBrowRightCorner",
    "LeftEyeLeftCorner", "LeftEyeCenter", "LeftEyeRightCorner",
    "RightEyeLeftCorner", "RightEyeCenter", "RightEyeRightCorner",
    "LeftEar", "NoseLeft", "NoseCenter", "NoseRight", "RightEar",
    "MouthLeftCorner", "MouthCenter", "MouthRightCorner", "ChinCenter",
)

_AFLW21_EDGES = (
    ("NoseCenter", "NoseLeft"), ("NoseCenter", "NoseRight"),
    ("NoseCenter", "LeftEyeCenter"), ("NoseCenter", "RightEyeCenter"),
    ("NoseCenter", "MouthCenter"),
    ("LeftEyeCenter", "LeftEyeLeftCorner"), ("LeftEyeCenter", "LeftEyeRightCorner"),
    ("LeftEyeCenter", "LeftBrowCenter"),
    ("RightEyeCenter", "RightEyeLeftCorner"), ("RightEyeCenter", "RightEyeRightCorner"),
    ("RightEyeCenter", "RightBrowCenter"),
    ("LeftBrowCenter", "LeftBrowLeftCorner"), ("LeftBrowCenter", "LeftBrowRightCorner"),
    ("RightBrowCenter", "RightBrowLeftCorner"), ("RightBrowCenter", "RightBrowRightCorner"),
    ("LeftEyeLeftCorner", "LeftEar"), ("RightEyeRightCorner", "RightEar"),
    ("MouthCenter", "MouthLeftCorner"), ("MouthCenter", "MouthRightCorner"),
    ("MouthCenter", "ChinCenter"),
)


class TreeError(ValueError):
    pass


@dataclass
class KeypointTree:
    """Rooted spanning tree over keypoint indices 0..L-1."""

    names: tuple[str, ...]
    root: int
    edges: tuple[tuple[int, int], ...]
    _order: tuple[tuple[int, int], ...] = field(init=False, repr=False)

    def __post_init__(self):
        self.names = tuple(self.names)
        self.edges = tuple((int(p), int(c)) for p, c in self.edges)
        n = len(self.names)
        if len(set(self.names)) != n:
            raise TreeError("duplicate keypoint names")
        if not 0 <= self.root < n:
            raise TreeError(f"root {self.root} out of range")
        if len(self.edges) != n - 1:
            raise TreeError(f"a tree over {n} nodes needs {n - 1} edges, got {len(self.edges)}")
        children: dict[int, list[int]] = {i: [] for i in range(n)}
        parent_of: dict[int, int] = {}
        for p, c in self.edges:
            if not (0 <= p < n and 0 <= c < n) or p == c:
                raise TreeError(f"bad edge ({p}, {c})")
            if c in parent_of:
                raise TreeError(f"node {self.names[c]} has two parents")
            parent_of[c] = p
            children[p].append(c)
        if self.root in parent_of:
            raise TreeError("root cannot have a parent")
        order = []
        seen = {self.root}
        queue = deque([self.root])
        while queue:
            u = queue.popleft()
            for c in children[u]:
                if c in seen:
                    raise TreeError("cycle in keypoint tree")
                seen.add(c)
                order.append((u, c))
                queue.append(c)
        if len(seen) != n:
            missing = [self.names[i] for i in range(n) if i not in seen]
            raise TreeError(f"keypoint tree is disconnected; unreachable: {missing}")
        self._order = tuple(order)

    @property
    def num_nodes(self) -> int:
        return len(self.names)

    def bfs_edges(self) -> tuple[tuple[int, int], ...]:
        """(parent, child) pairs in breadth-first order from the root."""
        return self._order

    def bfs_nodes(self) -> list[int]:
        return [self.root] + [c for _, c in self._order]

    def to_text(self) -> str:
        return "".join(f"{self.names[p]} {self.names[c]}\n" for p, c in self.edges)

    @classmethod
    def from_text(cls, text: str, names: Sequence[str] | None = None) -> "KeypointTree":
        """Parse ``parent child`` lines.  Node order follows ``names`` when given,
        else first appearance; the root is the node that is never a child."""
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise TreeError(f"line {lineno}: expected 'parent child', got {raw!r}")
            pairs.append((parts[0], parts[1]))
        if names is None:
            seen: dict[str, None] = {}
            for p, c in pairs:
                seen.setdefault(p)
                seen.setdefault(c)
            names = list(seen)
        index = {n: i for i, n in enumerate(names)}
        for p, c in pairs:
            for node in (p, c):
                if node not in index:
                    raise TreeError(f"unknown keypoint {node!r}")
        children = {index[c] for _, c in pairs}
        roots = [i for i in range(len(names)) if i not in children]
        if len(roots) != 1:
            raise TreeError(f"expected exactly one root, found {len(roots)}")
        return cls(tuple(names), roots[0], tuple((index[p], index[c]) for p, c in pairs))

    @classmethod
    def load(cls, path: str | Path, names: Sequence[str] | None = None) -> "KeypointTree":
        return cls.from_text(Path(path).read_text(), names)


def default_tree(num_keypoints: int = 21, names: Sequence[str] | None = None) -> KeypointTree:
    """The 21-point facial tree rooted at NoseCenter, or a star rooted at node 0."""
    if num_keypoints == 21 and (names is None or tuple(names) == AFLW21):
        index = {n: i for i, n in enumerate(AFLW21)}
        return KeypointTree(AFLW21, index["NoseCenter"],
                            tuple((index[p], index[c]) for p, c in _AFLW21_EDGES))
    if names is None:
        names = tuple(f"kp{i}" for i in range(num_keypoints))
    if len(names) != num_keypoints:
        raise TreeError("names length does not match num_keypoints")
    return KeypointTree(tuple(names), 0, tuple((0, i) for i in range(1, num_keypoints)))


def message_edges(tree: KeypointTree, schedule: str) -> list[tuple[str, int, int]]:
    """(parameter prefix, sender, receiver) in execution order."""
    down = [(f"down.{p}.{c}", p, c) for p, c in tree.bfs_edges()]
    if schedule == "root_to_leaves":
        return down
    if schedule == "bidirectional":
        up = [(f"up.{c}.{p}", c, p) for p, c in reversed(tree.bfs_edges())]
        return down + up
    raise ValueError(f"unknown message schedule {schedule!r}")


# ---------------------------------------------------------------- parameters

def deconv_spec(config: ModelConfig) -> DeconvBlockSpec:
    return DeconvBlockSpec(squeeze_channels=config.branch_channels, up_channels=config.branch_up_channels)


def init_branches(rng, config: ModelConfig) -> tuple[dict[str, Tensor], dict[str, RunningStats]]:
    """Stems + upsampling ladders for L keypoint branches and the background branch."""
    params: dict[str, Tensor] = {}
    stats: dict[str, RunningStats] = {}
    cb = config.branch_channels
    spec = deconv_spec(config)
    for b in range(config.num_keypoints + 1):
        for k, v in init_conv(rng, cb, config.code_channels, 3).items():
            params[f"{b}.stem.{k}"] = v
        for s in range(config.branch_stages):
            for k, v in init_deconv_block(rng, cb, spec).items():
                params[f"{b}.up{s}.{k}"] = v
            if config.batchnorm:
                params.update(init_bn(cb, f"{b}.up{s}.bn"))
                stats[f"{b}.up{s}.bn"] = RunningStats(cb, np.float32)
        for k, v in init_conv(rng, 1, cb, 1).items():
            params[f"{b}.out.{k}"] = v
    return params, stats


def init_messages(tree: KeypointTree, config: ModelConfig, rng=None) -> dict[str, Tensor]:
    """One 3x3 kernel per directed message edge; zero unless ``rng`` is given."""
    cb = config.branch_channels
    params = {}
    for prefix, _, _ in message_edges(tree, config.message_schedule):
        if rng is None:
            params[f"{prefix}.w"] = zeros((cb, cb, 3, 3))
        else:
            params.update({f"{prefix}.{k}": v for k, v in init_conv(rng, cb, cb, 3).items()})
            params[f"{prefix}.w"].data *= 0.1
        params.setdefault(f"{prefix}.b", zeros((cb,)))
    return params


# ---------------------------------------------------------------- forward

def branch_stems(code: Tensor, params: Params, num_branches: int) -> list[Tensor]:
    """Branch-specific features at code resolution, one per branch (background last)."""
    return [relu(conv2d(code, params[f"{b}.stem.w"], params[f"{b}.stem.b"], padding=1))
            for b in range(num_branches)]


def pass_messages(stems: Sequence[Tensor], tree: KeypointTree, params: Params,
                  schedule: str = "root_to_leaves") -> list[Tensor]:
    """Sequential updates F_j <- F_j + relu(conv3x3(F_i)) along the tree.

    Each sender contributes its already-updated features.  Entries beyond the
    tree's nodes (the background branch) pass through untouched.
    """
    feats = list(stems)
    if len(feats) < tree.num_nodes:
        raise ValueError(f"need {tree.num_nodes} branch features, got {len(feats)}")
    for prefix, i, j in message_edges(tree, schedule):
        msg = conv2d(feats[i], params[f"{prefix}.w"], params[f"{prefix}.b"], padding=1)
        feats[j] = feats[j] + relu(msg)
    return feats


def branch_upsample(features: Sequence[Tensor], params: Params, config: ModelConfig,
                    stats: dict | None = None, mode: str = "train") -> Tensor:
    """Run each branch through its deconv ladder to full resolution; one logit
    channel per branch, keypoints first, background last.

    With ``config.batchnorm`` every deconv block is followed by batch norm.
    """
    spec = deconv_spec(config)
    maps = []
    for b, f in enumerate(features):
        h = f
        for s in range(config.branch_stages):
            h = deconv_block_forward(h, spec, subparams(params, f"{b}.up{s}"))
            if config.batchnorm:
                h = bn(h, params, stats, f"{b}.up{s}.bn", mode)
        maps.append(conv2d(h, params[f"{b}.out.w"], params[f"{b}.out.b"]))
    return concat(maps, axis=-3)
