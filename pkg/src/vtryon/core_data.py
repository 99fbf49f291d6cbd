"""Data types and deterministic constructors for the pipeline inputs.

Rasters are numpy arrays: images are ``(H, W, C)`` float32 in the unit
range, planar maps (heatmaps, priors) are channel-first ``(C, H, W)``
float32 so they drop straight into a network batch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

NUM_KEYPOINTS = 18
NUM_PRIOR_CHANNELS = NUM_KEYPOINTS + 1

# collapsed human-parsing label set
CLASS_NAMES = ("background", "hair/face", "skin", "upper-cloth", "bottom-cloth", "arms", "shoes")
BACKGROUND, FACE, SKIN, UPPER_CLOTH, BOTTOM_CLOTH, ARMS, SHOES = range(len(CLASS_NAMES))

KEYPOINT_NAMES = (
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
)

# reference patch radius at 256 rows, scaled with resolution
REFERENCE_HEIGHT = 256
REFERENCE_PATCH_RADIUS = 5


def check_image(img, value_range="unit"):
    """Validate an ``(H, W, C)`` raster. Returns it as float32."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    lo = 0.0 if value_range == "unit" else -1.0
    if img.size and (img.min() < lo - 1e-6 or img.max() > 1.0 + 1e-6):
        raise ValueError(f"image values outside the {value_range} range")
    return img


@dataclass(frozen=True)
class PoseKeypoints:
    """18 keypoints as an ``(18, 3)`` array of ``(x, y, visible)``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_KEYPOINTS, 3):
            raise ValueError(f"expected {NUM_KEYPOINTS} keypoints, got array of shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("keypoints must be finite")
        pts = pts.copy()
        pts[:, 2] = (pts[:, 2] > 0).astype(np.float64)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def invisible(cls):
        return cls(np.zeros((NUM_KEYPOINTS, 3)))

    @property
    def visible(self):
        return self.points[:, 2] > 0

    def validate(self, h, w):
        for k, (x, y, vis) in enumerate(self.points):
            if vis and not (0 <= x <= w - 1 and 0 <= y <= h - 1):
                raise ValueError(
                    f"visible keypoint {k} ({KEYPOINT_NAMES[k]}) at ({x:.1f}, {y:.1f}) "
                    f"lies outside a {h}x{w} image"
                )

    def scaled(self, sx, sy):
        pts = self.points.copy()
        pts[:, 0] *= sx
        pts[:, 1] *= sy
        return PoseKeypoints(pts)

    @classmethod
    def from_json(cls, path):
        """Read an array of 18 ``[x, y, confidence]`` triples; confidence <= 0 is invisible."""
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
            pts = np.asarray(raw, dtype=np.float64)
        except (ValueError, TypeError) as exc:
            raise ValueError(f"malformed pose file {path}: {exc}") from exc
        if pts.shape != (NUM_KEYPOINTS, 3):
            raise ValueError(f"malformed pose file {path}: expected 18 [x, y, c] triples, got {pts.shape}")
        return cls(pts)

    def to_json(self, path):
        Path(path).write_text(json.dumps([[float(x), float(y), float(v)] for x, y, v in self.points]))


@dataclass(frozen=True)
class SegMask:
    labels: np.ndarray
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"segmentation labels must be 2-D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("segmentation labels must be integers")
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise ValueError(f"labels must lie in [0, {len(self.class_names)})")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def shape(self):
        return self.labels.shape

    def class_index(self, name):
        try:
            return self.class_names.index(name)
        except ValueError:
            raise KeyError(f"class {name!r} not in label set {self.class_names}") from None

    def indicator(self, *names):
        idx = [self.class_index(n) for n in names]
        return np.isin(self.labels, idx)

    def one_hot(self):
        """``(num_classes, H, W)`` float32 encoding."""
        return (np.arange(self.num_classes)[:, None, None] == self.labels[None]).astype(np.float32)

    @classmethod
    def from_png(cls, path, class_names=CLASS_NAMES):
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise ValueError(f"{path}: expected a single-channel index image, got mode {im.mode}")
            return cls(np.asarray(im, dtype=np.uint8), class_names)

    def to_png(self, path, palette=None):
        im = Image.fromarray(self.labels.astype(np.uint8), mode="L")
        if palette is not None:
            im = im.convert("P")
            im.putpalette(np.asarray(palette, dtype=np.uint8).ravel().tolist())
        im.save(path)


@dataclass(frozen=True)
class PairedSample:
    product_image: np.ndarray
    model_image: np.ndarray
    pose: PoseKeypoints
    gt_seg: SegMask
    product_mask: np.ndarray | None = None
    model_id: str = ""
    cloth_id: str = ""

    def __post_init__(self):
        h, w = self.gt_seg.shape
        for name in ("product_image", "model_image"):
            img = getattr(self, name)
            if img.shape[:2] != (h, w):
                raise ValueError(f"{name} has resolution {img.shape[:2]}, expected {(h, w)}")
        if self.product_mask is not None and self.product_mask.shape != (h, w):
            raise ValueError("product_mask resolution mismatch")

    @property
    def resolution(self):
        return self.gt_seg.shape


@dataclass(frozen=True)
class PriorsConfig:
    patch_radius: int | None = None  # None: scale the reference radius with height
    shape_downsample: int = 16
    blur_radius: int = 0

    def radius_for(self, h):
        if self.patch_radius is not None:
            return self.patch_radius
        return max(0, int(round(REFERENCE_PATCH_RADIUS * h / REFERENCE_HEIGHT)))


def render_pose_heatmaps(pose, h, w, patch_radius):
    if h <= 0 or w <= 0:
        raise ValueError("heatmap size must be positive")
    if patch_radius < 0:
        raise ValueError("patch_radius must be non-negative")
    pose.validate(h, w)
    maps = np.zeros((NUM_KEYPOINTS, h, w), dtype=np.float32)
    for k, (x, y, vis) in enumerate(pose.points):
        if not vis:
            continue
        cx, cy = int(round(x)), int(round(y))
        maps[k, max(cy - patch_radius, 0):cy + patch_radius + 1,
             max(cx - patch_radius, 0):cx + patch_radius + 1] = 1.0
    return maps


def _box_blur(plane, radius):
    # separable mean filter, edge-replicated so constants stay constant
    if radius <= 0:
        return plane
    out = plane.astype(np.float64)
    size = 2 * radius + 1
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        csum = np.cumsum(padded, axis=axis, dtype=np.float64)
        csum = np.concatenate([np.zeros_like(np.take(csum, [0], axis=axis)), csum], axis=axis)
        n = out.shape[axis]
        out = (np.take(csum, np.arange(size, size + n), axis=axis)
               - np.take(csum, np.arange(0, n), axis=axis)) / size
    return out


def make_body_shape(gt_seg, blur_radius=0, downsample=16):
    """Coarse silhouette of all non-background pixels, values in [0, 1]."""
    fg = (gt_seg.labels != gt_seg.class_index("background")).astype(np.float32)
    h, w = fg.shape
    if downsample > 1:
        t = torch.from_numpy(fg)[None, None]
        small = F.interpolate(t, size=(max(1, h // downsample), max(1, w // downsample)), mode="area")
        fg = F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
    fg = _box_blur(fg, blur_radius)
    return np.clip(fg, 0.0, 1.0).astype(np.float32)


def make_priors(pose, gt_seg, config=None, resolution=None):
    """19-plane cloth-agnostic person representation: 18 heatmaps then body shape."""
    config = config or PriorsConfig()
    h, w = gt_seg.shape
    if resolution is not None and tuple(resolution) != (h, w):
        raise ValueError(f"resolution mismatch: mask is {h}x{w}, expected {resolution[0]}x{resolution[1]}")
    heat = render_pose_heatmaps(pose, h, w, config.radius_for(h))
    shape = make_body_shape(gt_seg, config.blur_radius, config.shape_downsample)
    return np.concatenate([heat, shape[None]], axis=0)


def extract_gt_warp(model, gt_seg):
    """Cloth worn in ``model``: returns ``(model * cloth_mask, cloth_mask)``."""
    model = np.asarray(model, dtype=np.float32)
    if model.shape[:2] != gt_seg.shape:
        raise ValueError("model image and mask resolution differ")
    mask = gt_seg.indicator("upper-cloth").astype(np.float32)
    return model * mask[..., None], mask


def texture_priors(model, gt_seg):
    """Model pixels of the regions the garment swap leaves untouched."""
    model = np.asarray(model, dtype=np.float32)
    if model.shape[:2] != gt_seg.shape:
        raise ValueError("model image and mask resolution differ")
    keep = gt_seg.indicator("hair/face", "bottom-cloth").astype(np.float32)
    return model * keep[..., None]
