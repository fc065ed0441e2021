"""``facetree`` command line: train, eval, predict, gradcheck, synth."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .branches import KeypointTree, TreeError
from .config import ConfigError, ModelConfig, TrainConfig, format_config, load_config
from .data import (AnnotationError, crop_image, dataset_from_samples, image_to_input, keypoint_names,
                   keypoints_from_crop, load_dataset, read_image, write_synthetic_dataset)
from .evaluation import PROTOCOLS, ProtocolError, decode_keypoints, predict, run_protocol
from .gradcheck import format_table, run_gradchecks
from .heads import VISIBILITY_THRESHOLD
from .training import Checkpoint, pretrain_classification, train_multitask

ANNOTATION_FILE = "annotations.tsv"
SCHEDULE_FLAGS = {"root": "root_to_leaves", "bidir": "bidirectional"}


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: str
    seed: int
    inputs: dict[str, str]
    outputs: list[str] = field(default_factory=list)
    timestamp: str = ""

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="facetree", description="Tree-structured facial keypoint detector.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="key=value config file")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory or annotation file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="classification pretraining then multitask training")
    common(t)
    t.add_argument("--tree", help="keypoint tree file (parent child per line)")
    t.add_argument("--routing", choices=("on", "off"))
    t.add_argument("--schedule", choices=tuple(SCHEDULE_FLAGS))
    t.add_argument("--phase", choices=("both", "pretrain", "multitask"), default="both")
    t.add_argument("--init", help="pretraining checkpoint for --phase multitask")

    e = sub.add_parser("eval", help="evaluate a checkpoint under a protocol")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--protocol", choices=PROTOCOLS, default="full")
    e.add_argument("--mode", choices=("regression", "heatmap"), default="regression")

    r = sub.add_parser("predict", help="keypoints, pose and visibility for boxed faces")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--boxes", required=True, help="lines of: image x y w h (tab separated)")
    r.add_argument("--mode", choices=("regression", "heatmap"), default="regression")

    g = sub.add_parser("gradcheck", help="finite-difference check of every op")
    common(g, data=False)

    s = sub.add_parser("synth", help="render a synthetic dataset to disk")
    common(s, data=False)
    s.add_argument("--count", type=int, default=2000)
    return p


# ---------------------------------------------------------------- helpers

def _require_file(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _annotation_path(data: str) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / ANNOTATION_FILE
    if not p.is_file():
        raise FileNotFoundError(f"no annotation file at {p}")
    return p


def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    if args.config:
        mcfg, tcfg = load_config(_require_file(args.config, "config file"))
    else:
        mcfg, tcfg = ModelConfig.desk(), TrainConfig()
    over = {}
    if getattr(args, "routing", None):
        over["routing_enabled"] = args.routing == "on"
    if getattr(args, "schedule", None):
        over["message_schedule"] = SCHEDULE_FLAGS[args.schedule]
    if over:
        mcfg = dataclasses.replace(mcfg, **over)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    return mcfg, tcfg


def _load_tree(path: str | None, mcfg: ModelConfig) -> KeypointTree | None:
    if path is None:
        return None
    tree = KeypointTree.load(_require_file(path, "tree file"), keypoint_names(mcfg.num_keypoints))
    if tree.num_nodes != mcfg.num_keypoints:
        raise TreeError(f"tree has {tree.num_nodes} nodes but L={mcfg.num_keypoints}")
    return tree


def _load_checkpoint(path: str) -> Checkpoint:
    return Checkpoint.load(_require_file(path, "checkpoint"))


# ---------------------------------------------------------------- commands

def cmd_train(args, out: Path, manifest: RunManifest) -> None:
    mcfg, tcfg = _configs(args)
    tree = _load_tree(args.tree, mcfg)
    ann = _annotation_path(args.data)
    init = _load_checkpoint(args.init) if args.init else None
    if args.phase == "multitask" and init is None:
        raise UsageError("--phase multitask needs --init")
    manifest.config = format_config(mcfg, tcfg)
    manifest.seed = tcfg.seed
    manifest.inputs.update(data=str(ann), tree=str(args.tree or ""), init=str(args.init or ""))
    data = load_dataset(ann, mcfg)
    out.mkdir(parents=True, exist_ok=True)
    if args.phase in ("both", "pretrain"):
        with open(out / "pretrain_loss.csv", "w") as log:
            init = pretrain_classification(data, mcfg, tcfg, tree, log)
        init.save(out / "pretrain.ckpt")
        manifest.outputs += ["pretrain_loss.csv", "pretrain.ckpt"]
    if args.phase in ("both", "multitask"):
        if tree is not None:
            init = dataclasses.replace(init, tree=tree)
        with open(out / "loss.csv", "w") as log:
            final = train_multitask(data, mcfg, tcfg, init, log)
        final.save(out / "model.ckpt")
        manifest.outputs += ["loss.csv", "model.ckpt"]


def cmd_eval(args, out: Path, manifest: RunManifest) -> None:
    ckpt = _load_checkpoint(args.checkpoint)
    ann = _annotation_path(args.data)
    manifest.config = format_config(ckpt.model_config, ckpt.train_config)
    manifest.inputs.update(data=str(ann), checkpoint=args.checkpoint, protocol=args.protocol, mode=args.mode)
    data = load_dataset(ann, ckpt.model_config)
    if args.protocol == "pifa" and not data.has_pose:
        raise ProtocolError("protocol pifa needs yaw for every face, but some annotations lack pose")
    report = run_protocol(ckpt.build_model(), data, args.protocol, ckpt.mean_shape, args.mode)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "ced.csv").write_text(report.ced_csv())
    np.savetxt(out / "per_sample_nme.txt", report.per_sample_nme, fmt="%.8g")
    manifest.outputs += ["report.txt", "ced.csv", "per_sample_nme.txt"]
    sys.stdout.write(report.to_text())


def _read_boxes(path: Path, root: Path) -> list[tuple[Path, tuple[float, ...]]]:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise AnnotationError(f"{path}:{lineno}: expected 'image x y w h', got {len(parts)} fields")
        try:
            box = tuple(float(v) for v in parts[1:])
        except ValueError as exc:
            raise AnnotationError(f"{path}:{lineno}: {exc}") from None
        if box[2] <= 0 or box[3] <= 0:
            raise AnnotationError(f"{path}:{lineno}: face box must have positive size")
        img = Path(parts[0])
        rows.append((img if img.is_absolute() else root / img, box))
    return rows


def cmd_predict(args, out: Path, manifest: RunManifest) -> None:
    ckpt = _load_checkpoint(args.checkpoint)
    boxes_path = _require_file(args.boxes, "box list")
    root = Path(args.data)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    rows = _read_boxes(boxes_path, root)
    for img, _ in rows:
        _require_file(str(img), "image")
    mcfg = ckpt.model_config
    S, L = mcfg.input_size, mcfg.num_keypoints
    manifest.config = format_config(mcfg, ckpt.train_config)
    manifest.inputs.update(data=str(root), boxes=str(boxes_path), checkpoint=args.checkpoint, mode=args.mode)
    if args.mode == "regression" and ckpt.kind != "multitask":
        raise UsageError("regression decoding needs a multitask checkpoint; use --mode heatmap")
    model = ckpt.build_model()
    images = np.stack([image_to_input(crop_image(read_image(p), box, S)) for p, box in rows]) \
        if rows else np.zeros((0, 3, S, S), np.float32)
    outputs = predict(model, images)
    lines = []
    if rows:
        pts, vis = decode_keypoints(outputs, ckpt.mean_shape, args.mode, S, L)
        for i, (p, box) in enumerate(rows):
            image_pts = keypoints_from_crop(pts[i], box, S)
            fields = [str(p)]
            fields += [f"{v:.3f}" for v in outputs["pose"][i]] if "pose" in outputs else ["nan"] * 3
            for k in range(L):
                conf = float(vis[i, k]) if vis is not None else 1.0
                fields += [f"{image_pts[k, 0]:.3f}", f"{image_pts[k, 1]:.3f}",
                           str(int(conf >= VISIBILITY_THRESHOLD)), f"{conf:.4f}"]
            lines.append("\t".join(fields))
    out.mkdir(parents=True, exist_ok=True)
    header = ["image", "yaw", "pitch", "roll"]
    for name in keypoint_names(L):
        header += [f"{name}.x", f"{name}.y", f"{name}.visible", f"{name}.confidence"]
    (out / "predictions.tsv").write_text("\t".join(header) + "\n" + "".join(l + "\n" for l in lines))
    manifest.outputs.append("predictions.tsv")


def cmd_gradcheck(args, out: Path, manifest: RunManifest) -> int:
    seed = args.seed if args.seed is not None else 0
    manifest.seed = seed
    results = run_gradchecks(seed)
    table = format_table(results)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.txt").write_text(table)
    manifest.outputs.append("gradcheck.txt")
    sys.stdout.write(table)
    failed = [r.name for r in results if not r.passed]
    if failed:
        sys.stderr.write(f"facetree: gradcheck failed for {', '.join(failed)}\n")
        return 1
    return 0


def cmd_synth(args, out: Path, manifest: RunManifest) -> None:
    mcfg, tcfg = _configs(args)
    if args.count < 1:
        raise UsageError("--count must be positive")
    manifest.config = format_config(mcfg)
    manifest.seed = tcfg.seed
    manifest.inputs.update(count=str(args.count))
    write_synthetic_dataset(out, args.count, mcfg, tcfg.seed)
    manifest.outputs += [ANNOTATION_FILE, "images/"]


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        out = Path(args.out)
        manifest = RunManifest(command=" ".join(["facetree"] + list(sys.argv[1:] if argv is None else argv)),
                               config="", seed=args.seed if args.seed is not None else 0, inputs={},
                               timestamp=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
        code = COMMANDS[args.command](args, out, manifest) or 0
        out.mkdir(parents=True, exist_ok=True)
        manifest.write(out)
        return code
    except UsageError as exc:
        sys.stderr.write(f"facetree: usage error: {exc}\n")
        return 2
    except (ConfigError, AnnotationError, ProtocolError, TreeError, FileNotFoundError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        sys.stderr.write(f"facetree: error: {msg}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
