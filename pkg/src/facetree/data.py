"""Annotations, face crops, label maps, mean shapes and synthetic faces.

Coordinates are continuous pixel coordinates with pixel centres on integers:
pixel (row i, col j) covers [j - 0.5, j + 0.5) x [i - 0.5, i + 0.5).  A
keypoint's label pixel is therefore its coordinate rounded to the nearest
integer.  Face boxes are (x, y, w, h) with (x, y) the top-left edge.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .branches import AFLW21
from .config import ModelConfig

CROP_MARGIN = 0.1
NOISE_SIGMA = 0.02


class AnnotationError(ValueError):
    pass


@dataclass
class Annotation:
    image_path: str
    box: tuple[float, float, float, float]
    keypoints: np.ndarray            # (L, 2); NaN rows for invisible points
    visibility: np.ndarray           # (L,) of {0, 1}
    pose: tuple[float, float, float] | None = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=np.int64).reshape(-1)
        self.box = tuple(float(v) for v in self.box)
        if self.pose is not None:
            self.pose = tuple(float(v) for v in self.pose)
        if len(self.keypoints) != len(self.visibility):
            raise AnnotationError("keypoints and visibility lengths differ")
        if not np.all((self.visibility == 0) | (self.visibility == 1)):
            raise AnnotationError("visibility flags must be 0 or 1")
        vis = self.visibility.astype(bool)
        if np.any(np.isnan(self.keypoints[vis])):
            raise AnnotationError("visible keypoint without coordinates")
        self.keypoints[~vis] = np.nan

    @property
    def num_keypoints(self) -> int:
        return len(self.visibility)

    @property
    def face_size(self) -> float:
        return math.sqrt(self.box[2] * self.box[3])


# ---------------------------------------------------------------- annotation files

def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def format_annotation(a: Annotation) -> str:
    pose = a.pose if a.pose is not None else (math.nan,) * 3
    fields_ = [a.image_path] + [_fmt(v) for v in a.box] + [_fmt(v) for v in pose]
    for (x, y), v in zip(a.keypoints, a.visibility):
        fields_ += [_fmt(x), _fmt(y), str(int(v))] if v else ["nan", "nan", "0"]
    return "\t".join(fields_)


def save_annotations(path: str | Path, annotations: Iterable[Annotation]) -> None:
    Path(path).write_text("".join(format_annotation(a) + "\n" for a in annotations))


def parse_annotation_line(line: str, num_keypoints: int, lineno: int = 0, source: str = "<text>") -> Annotation:
    parts = line.rstrip("\n").split("\t")
    expected = 8 + 3 * num_keypoints
    if len(parts) != expected:
        raise AnnotationError(
            f"{source}:{lineno}: expected {expected} tab-separated fields for L={num_keypoints}, got {len(parts)}")
    try:
        nums = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise AnnotationError(f"{source}:{lineno}: {exc}") from None
    box, pose, rest = nums[0:4], nums[4:7], nums[7:]
    if box[2] <= 0 or box[3] <= 0:
        raise AnnotationError(f"{source}:{lineno}: face box must have positive size")
    triples = np.array(rest).reshape(num_keypoints, 3)
    vis = triples[:, 2]
    if not np.all((vis == 0) | (vis == 1)):
        raise AnnotationError(f"{source}:{lineno}: visibility flags must be 0 or 1")
    kp = triples[:, :2].copy()
    if np.any(np.isnan(kp[vis == 1])):
        raise AnnotationError(f"{source}:{lineno}: visible keypoint without coordinates")
    if np.any(~np.isnan(kp[vis == 0])):
        raise AnnotationError(f"{source}:{lineno}: invisible keypoints must use 'nan nan 0'")
    pose_t = None if all(math.isnan(p) for p in pose) else tuple(pose)
    if pose_t is not None and any(math.isnan(p) for p in pose):
        raise AnnotationError(f"{source}:{lineno}: partial pose")
    return Annotation(parts[0], tuple(box), kp, vis.astype(np.int64), pose_t)


def load_annotations(path: str | Path, num_keypoints: int) -> list[Annotation]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            out.append(parse_annotation_line(line, num_keypoints, lineno, str(path)))
    return out


# ---------------------------------------------------------------- crops and labels

def crop_region(box: Sequence[float], margin: float = CROP_MARGIN) -> tuple[float, float, float, float]:
    """Face box grown by ``margin`` of its size on every side: (x0, y0, w, h)."""
    x, y, w, h = box
    return x - margin * w, y - margin * h, w * (1 + 2 * margin), h * (1 + 2 * margin)


def keypoints_to_crop(keypoints: np.ndarray, box, size: int, margin: float = CROP_MARGIN) -> np.ndarray:
    x0, y0, w, h = crop_region(box, margin)
    out = np.empty_like(keypoints, dtype=np.float64)
    # edge coordinate of a centre-on-integer point is p + 0.5
    out[:, 0] = (keypoints[:, 0] + 0.5 - (x0 + 0.5)) * size / w - 0.5
    out[:, 1] = (keypoints[:, 1] + 0.5 - (y0 + 0.5)) * size / h - 0.5
    return out


def keypoints_from_crop(points: np.ndarray, box, size: int, margin: float = CROP_MARGIN) -> np.ndarray:
    x0, y0, w, h = crop_region(box, margin)
    out = np.empty_like(points, dtype=np.float64)
    out[..., 0] = (points[..., 0] + 0.5) * w / size + x0
    out[..., 1] = (points[..., 1] + 0.5) * h / size + y0
    return out


def crop_image(image: np.ndarray, box, size: int, margin: float = CROP_MARGIN) -> np.ndarray:
    """Bilinear crop of the margin-expanded face box to ``size`` x ``size`` (float32 in [0, 1])."""
    from PIL import Image

    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255), 0, 255).astype(np.uint8)
    x0, y0, w, h = crop_region(box, margin)
    # PIL boxes use edge coordinates: our centre-on-integer x0 edge sits at x0 + 0.5
    pil = Image.fromarray(arr)
    out = pil.transform((size, size), Image.Transform.EXTENT,
                        (x0 + 0.5, y0 + 0.5, x0 + 0.5 + w, y0 + 0.5 + h),
                        resample=Image.Resampling.BILINEAR)
    return np.asarray(out, dtype=np.float32) / 255.0


def label_pixels(points: np.ndarray, visibility: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-pixel (row, col) per keypoint and the visibility after bounds checks."""
    vis = np.asarray(visibility).astype(bool).copy()
    pix = np.zeros((len(vis), 2), dtype=np.int64)
    for k in np.flatnonzero(vis):
        col, row = np.round(points[k]).astype(np.int64)
        if not (0 <= row < size and 0 <= col < size):
            warnings.warn(f"keypoint {k} falls outside the {size}px crop; marking it invisible")
            vis[k] = False
            continue
        pix[k] = (row, col)
    return pix, vis


def build_label_map(points: np.ndarray, visibility: np.ndarray, config: ModelConfig,
                    dtype=np.float32) -> np.ndarray:
    """One-hot (L+1, S, S) map: class k at keypoint k's pixel, background elsewhere.

    ``points`` are crop coordinates.  When two visible keypoints share a
    pixel the later one keeps it.
    """
    size, L = config.input_size, config.num_keypoints
    if len(points) != L:
        raise ValueError(f"expected {L} keypoints, got {len(points)}")
    lab = np.zeros((L + 1, size, size), dtype=dtype)
    lab[L] = 1
    pix, vis = label_pixels(points, visibility, size)
    for k in np.flatnonzero(vis):
        r, c = pix[k]
        lab[:, r, c] = 0
        lab[k, r, c] = 1
    return lab


def build_label_maps(points: np.ndarray, visibility: np.ndarray, config: ModelConfig,
                     dtype=np.float32) -> np.ndarray:
    return np.stack([build_label_map(p, v, config, dtype) for p, v in zip(points, visibility)])


def annotation_label_map(annotation: Annotation, config: ModelConfig) -> np.ndarray:
    pts = keypoints_to_crop(annotation.keypoints, annotation.box, config.input_size)
    return build_label_map(pts, annotation.visibility, config)


# ---------------------------------------------------------------- mean shape

@dataclass
class MeanShape:
    """Mean keypoint layout in crop-fraction units, interleaved x, y (length 2L)."""

    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float32).reshape(-1)


def to_fractions(points: np.ndarray, size: int) -> np.ndarray:
    """(…, L, 2) crop pixels -> (…, 2L) fractions of the crop, float32."""
    pts = np.asarray(points, dtype=np.float64)
    return ((pts + 0.5) / size).reshape(pts.shape[:-2] + (-1,)).astype(np.float32)


def from_fractions(shape: np.ndarray, size: int) -> np.ndarray:
    s = np.asarray(shape, dtype=np.float64)
    return s.reshape(s.shape[:-1] + (s.shape[-1] // 2, 2)) * size - 0.5


def compute_mean_shape(shapes: np.ndarray, visibility: np.ndarray) -> MeanShape:
    """Per-keypoint mean over the instances where that keypoint is visible.

    ``shapes`` is (N, 2L) in crop fractions; never-visible keypoints get 0.5.
    """
    shapes = np.asarray(shapes, dtype=np.float64)
    vis = np.asarray(visibility).astype(bool)
    n, twoL = shapes.shape
    pts = shapes.reshape(n, twoL // 2, 2)
    mean = np.full((twoL // 2, 2), 0.5)
    for k in range(twoL // 2):
        if vis[:, k].any():
            mean[k] = pts[vis[:, k], k].mean(axis=0)
    return MeanShape(mean.reshape(-1))


def normalize_shape(shape, mean: MeanShape) -> np.ndarray:
    """Offset from the mean shape.  Exactly invertible for float32 inputs:
    the difference of two float32 values is exact in float64."""
    s = np.asarray(shape, dtype=np.float32).astype(np.float64)
    return s - mean.coords.astype(np.float64)


def denormalize_shape(shape, mean: MeanShape) -> np.ndarray:
    return np.asarray(shape, dtype=np.float64) + mean.coords.astype(np.float64)


# ---------------------------------------------------------------- synthetic faces

HEAD_RADII = np.array([0.8, 1.0, 0.9])
CAMERA_DISTANCE = 6.0
LIGHT = np.array([-0.3, 0.4, 1.0]) / np.linalg.norm([-0.3, 0.4, 1.0])
SKIN = np.array([0.86, 0.66, 0.52])
HAIR = np.array([0.25, 0.16, 0.10])

# (azimuth, elevation) in degrees on the head ellipsoid; +x is the subject's left
_TEMPLATE_21 = {
    "LeftBrowLeftCorner": (46, 30), "LeftBrowCenter": (31, 33), "LeftBrowRightCorner": (14, 31),
    "RightBrowLeftCorner": (-14, 31), "RightBrowCenter": (-31, 33), "RightBrowRightCorner": (-46, 30),
    "LeftEyeLeftCorner": (42, 17), "LeftEyeCenter": (30, 18), "LeftEyeRightCorner": (17, 17),
    "RightEyeLeftCorner": (-17, 17), "RightEyeCenter": (-30, 18), "RightEyeRightCorner": (-42, 17),
    "LeftEar": (70, 5), "NoseLeft": (11, -8), "NoseCenter": (0, -4), "NoseRight": (-11, -8),
    "RightEar": (-70, 5), "MouthLeftCorner": (22, -30), "MouthCenter": (0, -30),
    "MouthRightCorner": (-22, -30), "ChinCenter": (0, -52),
}
_TEMPLATE_5 = {
    "NoseCenter": (0, -4), "LeftEyeCenter": (30, 18), "RightEyeCenter": (-30, 18),
    "MouthLeftCorner": (22, -30), "MouthRightCorner": (-22, -30),
}


def keypoint_names(num_keypoints: int) -> tuple[str, ...]:
    if num_keypoints == 21:
        return AFLW21
    if num_keypoints == 5:
        return tuple(_TEMPLATE_5)
    return tuple(f"kp{i}" for i in range(num_keypoints))


def _template_angles(num_keypoints: int) -> np.ndarray:
    if num_keypoints == 21:
        return np.array([_TEMPLATE_21[n] for n in AFLW21], dtype=np.float64)
    if num_keypoints == 5:
        return np.array(list(_TEMPLATE_5.values()), dtype=np.float64)
    # node 0 at the nose, the rest on a ring around it
    ang = [(0.0, -4.0)]
    for i in range(1, num_keypoints):
        t = 2 * np.pi * (i - 1) / (num_keypoints - 1)
        ang.append((40 * np.sin(t), 30 * np.cos(t)))
    return np.array(ang)


@dataclass(frozen=True)
class FaceTemplate:
    points: np.ndarray    # (L, 3) on the head ellipsoid, head frame
    normals: np.ndarray   # (L, 3) unit outward normals


def face_template(num_keypoints: int) -> FaceTemplate:
    ang = np.radians(_template_angles(num_keypoints))
    az, el = ang[:, 0], ang[:, 1]
    d = np.stack([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)], axis=1)
    t = 1.0 / np.sqrt(((d / HEAD_RADII) ** 2).sum(axis=1))
    pts = d * t[:, None]
    n = pts / HEAD_RADII ** 2
    return FaceTemplate(pts, n / np.linalg.norm(n, axis=1, keepdims=True))


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Head-to-camera rotation Rz(roll) @ Rx(pitch) @ Ry(yaw), angles in degrees."""
    y, p, r = np.radians([yaw, pitch, roll])
    ry = np.array([[np.cos(y), 0, np.sin(y)], [0, 1, 0], [-np.sin(y), 0, np.cos(y)]])
    rx = np.array([[1, 0, 0], [0, np.cos(p), -np.sin(p)], [0, np.sin(p), np.cos(p)]])
    rz = np.array([[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1]])
    return rz @ rx @ ry


def _keypoint_colors(num_keypoints: int) -> np.ndarray:
    import colorsys

    return np.array([colorsys.hsv_to_rgb((k / num_keypoints + 0.05) % 1.0, 0.95, 1.0 if k % 2 == 0 else 0.55)
                     for k in range(num_keypoints)])


@dataclass
class SynthOptions:
    yaw_range: float = 90.0
    pitch_range: float = 30.0
    roll_range: float = 30.0
    shift: float = 0.03
    scale_jitter: float = 0.05
    noise_sigma: float = NOISE_SIGMA
    blob_sigma: float = 1.0


def _sample_rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    seq = rng_seed if isinstance(rng_seed, (tuple, list)) else (rng_seed,)
    return np.random.default_rng(np.random.SeedSequence([int(s) for s in seq]))


def synthesize_sample(rng_seed, config: ModelConfig, pose: Sequence[float] | None = None,
                      options: SynthOptions | None = None) -> tuple[np.ndarray, Annotation]:
    """Render one synthetic face at ``config.input_size``.

    The returned image is (S, S, 3) float32 in [0, 1]; the annotation's box is
    placed so that the margin-expanded crop is exactly the rendered image.
    """
    opt = options or SynthOptions()
    rng = _sample_rng(rng_seed)
    S, L = config.input_size, config.num_keypoints
    if pose is None:
        pose = (rng.uniform(-opt.yaw_range, opt.yaw_range),
                rng.uniform(-opt.pitch_range, opt.pitch_range),
                rng.uniform(-opt.roll_range, opt.roll_range))
    yaw, pitch, roll = (float(v) for v in pose)
    scale = 1.0 + rng.uniform(-opt.scale_jitter, opt.scale_jitter)
    shift = rng.uniform(-opt.shift, opt.shift, size=2) * S
    bg = rng.uniform(0.15, 0.55)
    noise = rng.normal(0.0, opt.noise_sigma, size=(S, S, 3))

    R = rotation_matrix(yaw, pitch, roll)
    cam = np.array([0.0, 0.0, CAMERA_DISTANCE])
    box_h = S / (1 + 2 * CROP_MARGIN)
    focal = box_h * CAMERA_DISTANCE / (2 * HEAD_RADII[1]) * scale
    cx, cy = (S - 1) / 2 + shift[0], (S - 1) / 2 + shift[1]

    tmpl = face_template(L)
    pts_cam = tmpl.points @ R.T
    normals_cam = tmpl.normals @ R.T
    visible = np.einsum("ij,ij->i", normals_cam, cam - pts_cam) > 0
    depth = CAMERA_DISTANCE - pts_cam[:, 2]
    kp = np.stack([cx + focal * pts_cam[:, 0] / depth, cy - focal * pts_cam[:, 1] / depth], axis=1)

    # ray-cast the head ellipsoid in the head frame
    jj, ii = np.meshgrid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64))
    dirs = np.stack([(jj - cx) / focal, -(ii - cy) / focal, -np.ones_like(jj)], axis=-1)
    o = (R.T @ cam) / HEAD_RADII
    d = (dirs @ R) / HEAD_RADII
    a = (d * d).sum(-1)
    b = 2 * (d @ o)
    c = o @ o - 1
    disc = b * b - 4 * a * c
    hit = disc > 0
    t = (-b - np.sqrt(np.where(hit, disc, 0))) / (2 * a)
    p_head = (o + t[..., None] * d) * HEAD_RADII
    n_head = p_head / HEAD_RADII ** 2
    n_head /= np.linalg.norm(n_head, axis=-1, keepdims=True) + 1e-12
    shade = 0.35 + 0.65 * np.clip((n_head @ R.T) @ LIGHT, 0, None)
    hair = (p_head[..., 1] > 0.55) | (p_head[..., 2] < -0.2)
    albedo = np.where(hair[..., None], HAIR, SKIN)
    image = np.full((S, S, 3), bg)
    image[hit] = (albedo * shade[..., None])[hit]

    colors = _keypoint_colors(L)
    for k in np.flatnonzero(visible):
        r2 = (jj - kp[k, 0]) ** 2 + (ii - kp[k, 1]) ** 2
        alpha = np.exp(-r2 / (2 * opt.blob_sigma ** 2))[..., None]
        image = image * (1 - alpha) + colors[k] * alpha
    image = np.clip(image + noise, 0.0, 1.0).astype(np.float32)

    w = S / (1 + 2 * CROP_MARGIN)
    box = (-0.5 + CROP_MARGIN * w, -0.5 + CROP_MARGIN * w, w, w)
    keypoints = np.where(visible[:, None], kp, np.nan)
    ann = Annotation(f"synthetic:{rng_seed}", box, keypoints, visible.astype(np.int64), (yaw, pitch, roll))
    return image, ann


# ---------------------------------------------------------------- datasets

@dataclass
class FaceDataset:
    """Preprocessed crops plus crop-space targets.

    images: (N, 3, S, S) float32 network inputs (crop - 0.5)
    points: (N, L, 2) crop pixel coordinates, NaN where invisible
    visibility: (N, L) {0, 1}
    poses: (N, 3) degrees, NaN rows where absent
    face_sizes: (N,) sqrt(w h) of the face box in crop pixels
    boxes: (N, 4) original face boxes (image pixels)
    """

    images: np.ndarray
    points: np.ndarray
    visibility: np.ndarray
    poses: np.ndarray
    face_sizes: np.ndarray
    boxes: np.ndarray
    paths: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, index) -> "FaceDataset":
        index = np.asarray(index)
        return FaceDataset(self.images[index], self.points[index], self.visibility[index],
                           self.poses[index], self.face_sizes[index], self.boxes[index],
                           [self.paths[i] for i in index] if self.paths else [])

    @property
    def has_pose(self) -> bool:
        return not np.isnan(self.poses).any()


def image_to_input(image: np.ndarray) -> np.ndarray:
    """(S, S, 3) in [0, 1] -> (3, S, S) float32 network input."""
    return (np.asarray(image, dtype=np.float32).transpose(2, 0, 1) - 0.5).astype(np.float32)


def dataset_from_samples(samples: Sequence[tuple[np.ndarray, Annotation]], config: ModelConfig,
                         already_cropped: bool = False) -> FaceDataset:
    S = config.input_size
    images, points, vis, poses, sizes, boxes, paths = [], [], [], [], [], [], []
    for image, ann in samples:
        if ann.num_keypoints != config.num_keypoints:
            raise AnnotationError(f"{ann.image_path}: {ann.num_keypoints} keypoints, config expects "
                                  f"{config.num_keypoints}")
        crop = image if already_cropped else crop_image(image, ann.box, S)
        pts = keypoints_to_crop(ann.keypoints, ann.box, S)
        _, v = label_pixels(pts, ann.visibility, S)
        pts[~v] = np.nan
        images.append(image_to_input(crop))
        points.append(pts)
        vis.append(v.astype(np.int64))
        poses.append(ann.pose if ann.pose is not None else (np.nan,) * 3)
        _, _, cw, ch = crop_region(ann.box)
        sizes.append(math.sqrt(ann.box[2] * S / cw * ann.box[3] * S / ch))
        boxes.append(ann.box)
        paths.append(ann.image_path)
    L = config.num_keypoints
    return FaceDataset(
        np.stack(images) if images else np.zeros((0, 3, S, S), np.float32),
        np.stack(points) if points else np.zeros((0, L, 2)),
        np.stack(vis) if vis else np.zeros((0, L), np.int64),
        np.array(poses, dtype=np.float64).reshape(-1, 3),
        np.array(sizes, dtype=np.float64),
        np.array(boxes, dtype=np.float64).reshape(-1, 4),
        paths,
    )


def synthetic_dataset(n: int, config: ModelConfig, base_seed: int = 0,
                      options: SynthOptions | None = None) -> FaceDataset:
    """``n`` synthetic faces; sample i uses the RNG stream (base_seed, i)."""
    samples = [synthesize_sample((base_seed, i), config, options=options) for i in range(n)]
    return dataset_from_samples(samples, config, already_cropped=True)


def read_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"image not found: {p}")
    with Image.open(p) as im:
        return np.asarray(im.convert("RGB"))


def load_dataset(annotation_file: str | Path, config: ModelConfig) -> FaceDataset:
    """Read an annotation file and crop every referenced image (paths relative to the file)."""
    root = Path(annotation_file).parent
    anns = load_annotations(annotation_file, config.num_keypoints)
    samples = []
    for a in anns:
        p = Path(a.image_path)
        samples.append((read_image(p if p.is_absolute() else root / p), a))
    return dataset_from_samples(samples, config)


def write_synthetic_dataset(out_dir: str | Path, n: int, config: ModelConfig, base_seed: int = 0,
                            options: SynthOptions | None = None) -> Path:
    """Render ``n`` faces as PNGs plus ``annotations.tsv``; returns the annotation path."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    anns = []
    for i in range(n):
        image, ann = synthesize_sample((base_seed, i), config, options=options)
        rel = f"images/{i:06d}.png"
        Image.fromarray(np.clip(np.round(image * 255), 0, 255).astype(np.uint8)).save(out / rel)
        ann.image_path = rel
        anns.append(ann)
    path = out / "annotations.tsv"
    save_annotations(path, anns)
    return path
