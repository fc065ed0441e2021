"""The full network: encoder, pose net, routing, keypoint branches and heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backbone, branches, heads
from .blocks import subparams
from .branches import KeypointTree, default_tree
from .config import ModelConfig
from .data import keypoint_names
from .tensor import RunningStats, Tensor

SHARED_PREFIXES = ("conv.", "branch.", "msg.")


@dataclass
class ModelOutput:
    logits: Tensor              # (N, L+1, S, S) response maps, background last
    code: Tensor                # (N, C, s, s) image code after routing
    pose: Tensor | None = None          # (N, 3) degrees
    coords: Tensor | None = None        # (N, 2L) mean-shape-normalized fractions
    visibility: Tensor | None = None    # (N, L) in [0, 1]


class FaceTreeNet:
    """Parameters live in one flat ``name -> Tensor`` table.

    ``multitask=False`` builds only the encoder and the keypoint branches,
    which is the network used for classification pretraining.
    """

    def __init__(self, config: ModelConfig, tree: KeypointTree | None = None, seed: int = 0,
                 multitask: bool = True):
        self.config = config
        self.tree = tree or default_tree(config.num_keypoints, keypoint_names(config.num_keypoints))
        if self.tree.num_nodes != config.num_keypoints:
            raise ValueError(f"tree has {self.tree.num_nodes} nodes, config L={config.num_keypoints}")
        self.multitask = multitask
        self.frozen: set[str] = set()
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, RunningStats] = {}
        conv_p, conv_s = backbone.init_trunk(rng, config)
        self._add("conv", conv_p, conv_s)
        self._add("branch", *branches.init_branches(rng, config))
        self._add("msg", branches.init_messages(self.tree, config))
        if multitask:
            pose_p, pose_s = backbone.init_pose(rng, config)
            self._add("pose", pose_p, pose_s)
            self._add("route", backbone.init_routing(config))
            self._add("fid", *heads.init_head(rng, config, 2 * config.num_keypoints))
            vis, vis_stats = heads.init_head(rng, config, config.num_keypoints)
            vis["fc.b"].data[:] = 0.5
            self._add("vis", vis, vis_stats)

    def _add(self, prefix: str, params: dict, stats: dict | None = None) -> None:
        for k, v in params.items():
            self.params[f"{prefix}.{k}"] = v
        for k, v in (stats or {}).items():
            self.stats[f"{prefix}.{k}"] = v

    def _stats(self, prefix: str) -> dict:
        return {k[len(prefix) + 1:]: v for k, v in self.stats.items() if k.startswith(prefix + ".")}

    # -- parameter views
    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def shared_names(self) -> list[str]:
        return [k for k in self.params if k.startswith(SHARED_PREFIXES)]

    def message_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("msg.")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_message_kernels(self) -> int:
        return sum(1 for k in self.params if k.startswith("msg.") and k.endswith(".w"))

    def freeze_messages(self, zero: bool = True) -> None:
        """Disable message passing: zero the kernels and exclude them from training."""
        for k in self.message_names():
            if zero:
                self.params[k].data[...] = 0
            self.frozen.add(k)

    # -- forward pieces
    def encode_image(self, x: Tensor, mode: str = "train") -> Tensor:
        return backbone.encode_image(x, subparams(self.params, "conv"), self._stats("conv"), self.config, mode)

    def pose_forward(self, x: Tensor, mode: str = "train") -> tuple[Tensor, Tensor]:
        return backbone.pose_forward(x, subparams(self.params, "pose"), self._stats("pose"), self.config, mode)

    def response_maps(self, code: Tensor, mode: str = "train") -> Tensor:
        p = subparams(self.params, "branch")
        stems = branches.branch_stems(code, p, self.config.num_keypoints + 1)
        feats = branches.pass_messages(stems, self.tree, subparams(self.params, "msg"),
                                       self.config.message_schedule)
        return branches.branch_upsample(feats, p, self.config, self._stats("branch"), mode)

    def forward(self, x, mode: str = "train") -> ModelOutput:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        code = self.encode_image(x, mode)
        if not self.multitask:
            return ModelOutput(self.response_maps(code, mode), code)
        pose, pose_code = self.pose_forward(x, mode)
        code = backbone.apply_routing(code, pose_code, subparams(self.params, "route"),
                                      self.config.routing_enabled)
        logits = self.response_maps(code, mode)
        coords = heads.regress_coordinates(logits, code, subparams(self.params, "fid"), self.config,
                                           self._stats("fid"), mode)
        vis = heads.predict_visibility(logits, code, subparams(self.params, "vis"), self.config,
                                       self._stats("vis"), mode)
        return ModelOutput(logits, code, pose, coords, vis)

    __call__ = forward

    # -- state transfer
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        for k, s in self.stats.items():
            out[f"stats:{k}.mean"] = s.mean
            out[f"stats:{k}.var"] = s.var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching arrays in; returns the names that were loaded."""
        loaded = []
        for k, arr in state.items():
            if k.startswith("stats:"):
                name, field = k[len("stats:"):].rsplit(".", 1)
                if name in self.stats:
                    getattr(self.stats[name], field)[...] = arr
                    loaded.append(k)
                elif strict:
                    raise KeyError(f"unexpected statistics {k}")
                continue
            if k not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {k}")
                continue
            if self.params[k].shape != arr.shape:
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {arr.shape}")
            self.params[k].data = np.array(arr, dtype=self.params[k].dtype)
            loaded.append(k)
        return loaded
