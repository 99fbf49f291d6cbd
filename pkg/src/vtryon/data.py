"""Dataset ingestion in the VITON directory layout and a synthetic generator.

Layout under ``root``::

    train_pairs.txt / test_pairs.txt     "model_image cloth_image" per line
    <split>/image/<model>.png            person wearing the garment
    <split>/cloth/<cloth>.png            in-shop garment on white
    <split>/cloth-mask/<cloth>.png       garment silhouette (255 inside)
    <split>/pose/<model stem>_keypoints.json
    <split>/parse/<model>.png            8-bit class index map

Synthetic datasets add ``warp/<model stem>.json`` (the exact TPS parameters
that placed the garment) and ``warped-cloth/<model>.png`` (the visible
warped garment).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .core_data import (
    ARMS, BACKGROUND, BOTTOM_CLOTH, FACE, KEYPOINT_NAMES, NUM_KEYPOINTS, SHOES, SKIN, UPPER_CLOTH,
    PairedSample, PoseKeypoints, SegMask, extract_gt_warp, make_priors, texture_priors,
)
from .tps import control_lattice
from .warp import warp_image

log = logging.getLogger(__name__)

SPLITS = ("train", "test")


def pairs_file(root, split):
    return Path(root) / f"{split}_pairs.txt"


def pose_name(model_id):
    return Path(model_id).stem + "_keypoints.json"


@dataclass
class DatasetManifest:
    root: Path
    split: str
    pairs: list
    paired: bool = True

    def __len__(self):
        return len(self.pairs)


def _read_pairs(path):
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'model_image cloth_image', got {line!r}")
        pairs.append((parts[0], parts[1]))
    return pairs


def derangement(n, seed):
    """Permutation of range(n) with no fixed point, drawn reproducibly."""
    if n == 0:
        return []
    if n == 1:
        raise ValueError("a single item cannot be deranged")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm.tolist()


def load_manifest(root, split="train", paired=True, seed=0):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    pairs = _read_pairs(pairs_file(root, split))
    other = pairs_file(root, SPLITS[1 - SPLITS.index(split)])
    if other.exists():
        shared = {m for m, _ in pairs} & {m for m, _ in _read_pairs(other)}
        if shared:
            raise ValueError(f"train and test splits share model images: {sorted(shared)[:5]}")
    base = root / split
    for model_id, cloth_id in pairs:
        required = [base / "image" / model_id, base / "parse" / model_id, base / "pose" / pose_name(model_id),
                    base / "cloth" / cloth_id, base / "cloth-mask" / cloth_id]
        missing = [str(p) for p in required if not p.exists()]
        if missing:
            raise FileNotFoundError(f"sample {model_id}: missing {', '.join(missing)}")
        PoseKeypoints.from_json(base / "pose" / pose_name(model_id))
    if not paired and pairs:
        perm = derangement(len(pairs), seed)
        pairs = [(pairs[i][0], pairs[j][1]) for i, j in enumerate(perm)]
    return DatasetManifest(root, split, pairs, paired)


def _read_rgb(path, size):
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise OSError(f"cannot decode {path}: {exc}") from exc


def _read_index(path, size):
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                im = im.convert("L")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.NEAREST)
            return np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise OSError(f"cannot decode {path}: {exc}") from exc


def load_sample(manifest, idx, resolution=None):
    """Decode pair ``idx``; rasters are resized to ``resolution`` (h, w) if given."""
    if not 0 <= idx < len(manifest):
        raise IndexError(f"sample index {idx} out of range for {len(manifest)} pairs")
    model_id, cloth_id = manifest.pairs[idx]
    base = Path(manifest.root) / manifest.split
    model = _read_rgb(base / "image" / model_id, resolution)
    h, w = model.shape[:2]
    cloth = _read_rgb(base / "cloth" / cloth_id, (h, w))
    cmask = (_read_index(base / "cloth-mask" / cloth_id, (h, w)) > 127).astype(np.float32)
    labels = _read_index(base / "parse" / model_id, (h, w))
    pose = PoseKeypoints.from_json(base / "pose" / pose_name(model_id))
    with Image.open(base / "image" / model_id) as im:
        src_w, src_h = im.size
    if (src_h, src_w) != (h, w):
        pose = pose.scaled((w - 1) / max(src_w - 1, 1), (h - 1) / max(src_h - 1, 1))
    return PairedSample(cloth, model, pose, SegMask(labels.astype(np.int64)), cmask, model_id, cloth_id)


def to_tensor(img):
    """(H, W, C) array -> (C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1)))


def make_batch(samples, priors_config=None):
    """Stack samples into the tensors every stage consumes.

    ``cloth`` is the product image with its background blanked by the cloth
    mask, which is what gets warped.
    """
    out = {k: [] for k in ("priors", "cloth", "model", "gt_warp", "cloth_mask", "labels", "priors_tt")}
    for s in samples:
        out["priors"].append(torch.from_numpy(make_priors(s.pose, s.gt_seg, priors_config)))
        pmask = s.product_mask if s.product_mask is not None else np.ones(s.resolution, np.float32)
        out["cloth"].append(to_tensor(s.product_image * pmask[..., None]))
        out["model"].append(to_tensor(s.model_image))
        gt_warp, cmask = extract_gt_warp(s.model_image, s.gt_seg)
        out["gt_warp"].append(to_tensor(gt_warp))
        out["cloth_mask"].append(torch.from_numpy(cmask)[None])
        out["labels"].append(torch.from_numpy(s.gt_seg.labels.copy()))
        out["priors_tt"].append(to_tensor(texture_priors(s.model_image, s.gt_seg)))
    return {k: torch.stack(v) for k, v in out.items()}


def load_split(root, split="train", paired=True, resolution=None, seed=0):
    manifest = load_manifest(root, split, paired, seed)
    return manifest, [load_sample(manifest, i, resolution) for i in range(len(manifest))]


# ---------------------------------------------------------------------------
# synthetic data

PATTERNS = ("stripes", "checker", "glyphs", "solid")

# canonical skeletons as (x, y) fractions of (W, H); arms vary per pose
_BODY = {
    "nose": (0.50, 0.12), "neck": (0.50, 0.22), "r_shoulder": (0.33, 0.25), "l_shoulder": (0.67, 0.25),
    "r_hip": (0.39, 0.56), "l_hip": (0.61, 0.56), "r_knee": (0.40, 0.75), "l_knee": (0.60, 0.75),
    "r_ankle": (0.40, 0.91), "l_ankle": (0.60, 0.91), "r_eye": (0.46, 0.10), "l_eye": (0.54, 0.10),
    "r_ear": (0.42, 0.12), "l_ear": (0.58, 0.12),
}
CANONICAL_ARMS = {
    "arms_down": ((0.27, 0.40), (0.26, 0.54), (0.73, 0.40), (0.74, 0.54)),
    "arms_out": ((0.19, 0.33), (0.08, 0.42), (0.81, 0.33), (0.92, 0.42)),
    "hands_on_hips": ((0.17, 0.41), (0.37, 0.53), (0.83, 0.41), (0.63, 0.53)),
    "folded_arms": ((0.29, 0.43), (0.63, 0.40), (0.71, 0.43), (0.37, 0.37)),
    "one_arm_raised": ((0.21, 0.15), (0.19, 0.04), (0.73, 0.40), (0.74, 0.54)),
    "both_raised": ((0.21, 0.15), (0.19, 0.04), (0.79, 0.15), (0.81, 0.04)),
}
POSE_NAMES = tuple(CANONICAL_ARMS)

# garment polygon in product-image fractions, before per-sample shape jitter
_GARMENT = ((0.40, 0.14), (0.50, 0.22), (0.60, 0.14), (0.79, 0.18), (0.75, 0.86), (0.25, 0.86), (0.21, 0.18))
_GARMENT_BOX = (0.21, 0.14, 0.79, 0.86)  # x0, y0, x1, y1

_SKIN_TONES = ((241, 194, 167), (224, 172, 105), (198, 134, 66), (141, 85, 36))
_HAIR = ((40, 26, 13), (90, 56, 37), (20, 20, 20), (180, 140, 80))


@dataclass
class SynthConfig:
    seed: int = 0
    n_samples: int = 8
    n_test: int = 4
    resolution: tuple = (64, 48)
    garment_patterns: tuple = PATTERNS
    pose_jitter: float = 0.02
    grid_size: int = 5
    warp_jitter: float = 0.03

    def __post_init__(self):
        self.resolution = tuple(self.resolution)
        self.garment_patterns = tuple(self.garment_patterns)
        bad = set(self.garment_patterns) - set(PATTERNS)
        if bad or not self.garment_patterns:
            raise ValueError(f"garment_patterns must be a non-empty subset of {PATTERNS}")
        if self.n_samples < 0 or self.n_test < 0:
            raise ValueError("sample counts must be non-negative")


def _color(rng, lo=0, hi=256):
    return tuple(int(c) for c in rng.integers(lo, hi, size=3))


def _pattern(rng, kind, h, w):
    """Full-frame uint8 texture."""
    img = np.empty((h, w, 3), np.uint8)
    c1, c2 = _color(rng, 0, 200), _color(rng, 60, 256)
    img[:] = c1
    scale = max(1, round(h / 64))
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "stripes":
        period = int(rng.integers(3, 7)) * scale
        img[(yy // (period // 2 + 1)) % 2 == 1] = c2
    elif kind == "checker":
        cell = int(rng.integers(2, 5)) * scale
        img[((yy // cell) + (xx // cell)) % 2 == 1] = c2
    elif kind == "glyphs":
        img[:] = c2
        ink = _color(rng, 0, 90)
        for row in range(int(0.35 * h), int(0.65 * h), 3 * scale):
            x = int(0.32 * w)
            while x < int(0.68 * w):
                length = int(rng.integers(1, 4)) * scale
                img[row:row + scale * 2, x:x + length] = ink
                x += length + scale
    return img


def _garment_polygon(rng, h, w):
    widen = rng.uniform(-0.04, 0.04)
    length = rng.uniform(-0.08, 0.0)
    neck = rng.uniform(-0.03, 0.05)
    pts = []
    for k, (fx, fy) in enumerate(_GARMENT):
        if k == 1:
            fy += neck
        if k in (3, 4):
            fx += widen
        if k in (5, 6):
            fx -= widen
        if k in (4, 5):
            fy += length
        pts.append((fx * (w - 1), fy * (h - 1)))
    return pts


def _skeleton(rng, pose_name, jitter, h, w):
    pts = dict(_BODY)
    re, rw, le, lw = CANONICAL_ARMS[pose_name]
    pts.update(r_elbow=re, r_wrist=rw, l_elbow=le, l_wrist=lw)
    scale = 1 + rng.uniform(-jitter, jitter)
    shift = rng.uniform(-jitter, jitter, size=2)
    out = np.zeros((NUM_KEYPOINTS, 3))
    for k, name in enumerate(KEYPOINT_NAMES):
        fx, fy = pts[name]
        fx = 0.5 + (fx - 0.5) * scale + shift[0] + rng.uniform(-jitter, jitter) / 2
        fy = 0.5 + (fy - 0.5) * scale + shift[1] + rng.uniform(-jitter, jitter) / 2
        x, y = fx * (w - 1), fy * (h - 1)
        vis = 0 <= x <= w - 1 and 0 <= y <= h - 1
        out[k] = (np.clip(x, 0, w - 1), np.clip(y, 0, h - 1), 1.0 if vis else 0.0)
    return out


def _norm(x, size):
    return 2 * x / (size - 1) - 1


def garment_params(kp, grid_size, rng, warp_jitter, h, w):
    """TPS offsets mapping the model torso box onto the product garment box."""
    r_sh, l_sh, r_hip, l_hip = kp[2, :2], kp[5, :2], kp[8, :2], kp[11, :2]
    mx0, mx1 = min(r_sh[0], r_hip[0]) - 0.03 * w, max(l_sh[0], l_hip[0]) + 0.03 * w
    my0 = min(r_sh[1], l_sh[1]) - 0.04 * h
    my1 = max(r_hip[1], l_hip[1]) + 0.05 * h
    px0, py0, px1, py1 = _GARMENT_BOX
    src_x0, src_x1 = _norm(px0 * (w - 1), w), _norm(px1 * (w - 1), w)
    src_y0, src_y1 = _norm(py0 * (h - 1), h), _norm(py1 * (h - 1), h)
    dst_x0, dst_x1 = _norm(mx0, w), _norm(mx1, w)
    dst_y0, dst_y1 = _norm(my0, h), _norm(my1, h)
    ctrl = control_lattice(grid_size).numpy()
    sx = src_x0 + (ctrl[:, 0] - dst_x0) * (src_x1 - src_x0) / (dst_x1 - dst_x0)
    sy = src_y0 + (ctrl[:, 1] - dst_y0) * (src_y1 - src_y0) / (dst_y1 - dst_y0)
    offsets = np.stack([sx, sy], 1) - ctrl
    offsets += rng.uniform(-warp_jitter, warp_jitter, size=offsets.shape)
    return offsets.reshape(-1)


def _thick_line(draw, pts, width, value):
    draw.line([tuple(p) for p in pts], fill=value, width=max(1, int(round(width))), joint="curve")
    r = width / 2
    for x, y in pts:
        draw.ellipse([x - r, y - r, x + r, y + r], fill=value)


def _render_sample(cfg, rng, index):
    h, w = cfg.resolution
    # product garment
    kind = cfg.garment_patterns[int(rng.integers(len(cfg.garment_patterns)))]
    texture = _pattern(rng, kind, h, w)
    mask_im = Image.new("L", (w, h), 0)
    ImageDraw.Draw(mask_im).polygon(_garment_polygon(rng, h, w), fill=255)
    pmask = np.asarray(mask_im) > 127
    product = np.full((h, w, 3), 255, np.uint8)
    product[pmask] = texture[pmask]

    # pose and placement of the garment
    pose_name = POSE_NAMES[index % len(POSE_NAMES)]
    kp = _skeleton(rng, pose_name, cfg.pose_jitter, h, w)
    theta = garment_params(kp, cfg.grid_size, rng, cfg.warp_jitter, h, w)
    cloth = torch.from_numpy((product * pmask[..., None]).astype(np.float32) / 255).permute(2, 0, 1)[None]
    alpha = torch.from_numpy(pmask.astype(np.float32))[None, None]
    params = torch.from_numpy(theta)[None]
    warped = warp_image(cloth, params)[0].permute(1, 2, 0).numpy()
    warped_alpha = warp_image(alpha, params)[0, 0].numpy()
    warped_u8 = np.clip(np.round(warped * 255), 0, 255).astype(np.uint8)

    # label map, painter's order
    lab_im = Image.new("L", (w, h), BACKGROUND)
    draw = ImageDraw.Draw(lab_im)
    P = {n: kp[i, :2] for i, n in enumerate(KEYPOINT_NAMES)}
    leg_w = 0.11 * w
    _thick_line(draw, [P["r_hip"], P["r_knee"], P["r_ankle"]], leg_w, BOTTOM_CLOTH)
    _thick_line(draw, [P["l_hip"], P["l_knee"], P["l_ankle"]], leg_w, BOTTOM_CLOTH)
    hip_top = min(P["r_hip"][1], P["l_hip"][1]) - 0.03 * h
    draw.polygon([(P["r_hip"][0] - leg_w / 2, hip_top), (P["l_hip"][0] + leg_w / 2, hip_top),
                  (P["l_hip"][0] + leg_w / 2, P["l_hip"][1] + 0.06 * h),
                  (P["r_hip"][0] - leg_w / 2, P["r_hip"][1] + 0.06 * h)], fill=BOTTOM_CLOTH)
    for foot in ("r_ankle", "l_ankle"):
        x, y = P[foot]
        draw.ellipse([x - 0.07 * w, y - 0.015 * h, x + 0.07 * w, y + 0.035 * h], fill=SHOES)
    nx, ny = P["neck"]
    draw.rectangle([nx - 0.05 * w, P["nose"][1], nx + 0.05 * w, ny + 0.04 * h], fill=SKIN)
    labels = np.asarray(lab_im).copy()
    labels[warped_alpha > 0.5] = UPPER_CLOTH
    lab_im = Image.fromarray(labels)
    draw = ImageDraw.Draw(lab_im)
    hx, hy = P["nose"]
    draw.ellipse([hx - 0.11 * w, hy - 0.085 * h, hx + 0.11 * w, hy + 0.075 * h], fill=FACE)
    arm_w = 0.075 * w
    _thick_line(draw, [P["r_shoulder"], P["r_elbow"], P["r_wrist"]], arm_w, ARMS)
    _thick_line(draw, [P["l_shoulder"], P["l_elbow"], P["l_wrist"]], arm_w, ARMS)
    for wrist in ("r_wrist", "l_wrist"):
        x, y = P[wrist]
        r = 0.045 * w
        draw.ellipse([x - r, y - r, x + r, y + r], fill=SKIN)
    labels = np.asarray(lab_im).astype(np.uint8)

    # colours
    skin = _SKIN_TONES[int(rng.integers(len(_SKIN_TONES)))]
    hair = _HAIR[int(rng.integers(len(_HAIR)))]
    pants = _color(rng, 0, 160)
    shoes = _color(rng, 0, 80)
    model = np.full((h, w, 3), 255, np.uint8)
    model[labels == SKIN] = skin
    model[labels == ARMS] = skin
    model[labels == BOTTOM_CLOTH] = pants
    model[labels == SHOES] = shoes
    face = labels == FACE
    model[face] = skin
    hair_rows = np.arange(h)[:, None] < hy - 0.01 * h
    model[face & hair_rows] = hair
    cloth_px = labels == UPPER_CLOTH
    model[cloth_px] = warped_u8[cloth_px]
    visible_warp = np.where(cloth_px[..., None], warped_u8, 0).astype(np.uint8)
    return dict(product=product, pmask=pmask, model=model, labels=labels, keypoints=kp, theta=theta,
                warped=visible_warp, pattern=kind, pose=pose_name)


def synth_generate(cfg, root):
    """Write a synthetic dataset under ``root`` and return its path.

    Every sample's ground truth is exact: the worn garment is the product
    resampled through the recorded TPS parameters.
    """
    root = Path(root)
    counts = {"train": cfg.n_samples, "test": cfg.n_test}
    for s, split in enumerate(SPLITS):
        base = root / split
        for sub in ("image", "cloth", "cloth-mask", "pose", "parse", "warp", "warped-cloth"):
            (base / sub).mkdir(parents=True, exist_ok=True)
        lines = []
        offset = 0 if split == "train" else cfg.n_samples
        for i in range(counts[split]):
            rng = np.random.default_rng([cfg.seed, s, i])
            smp = _render_sample(cfg, rng, i)
            stem = f"{offset + i:06d}"
            model_id, cloth_id = f"{stem}_0.png", f"{stem}_1.png"
            Image.fromarray(smp["model"]).save(base / "image" / model_id)
            Image.fromarray(smp["product"]).save(base / "cloth" / cloth_id)
            Image.fromarray((smp["pmask"] * 255).astype(np.uint8), mode="L").save(base / "cloth-mask" / cloth_id)
            Image.fromarray(smp["labels"], mode="L").save(base / "parse" / model_id)
            Image.fromarray(smp["warped"]).save(base / "warped-cloth" / model_id)
            PoseKeypoints(smp["keypoints"]).to_json(base / "pose" / pose_name(model_id))
            (base / "warp" / f"{stem}_0.json").write_text(json.dumps({
                "grid_size": cfg.grid_size, "resolution": list(cfg.resolution),
                "theta": [float(t) for t in smp["theta"]], "pattern": smp["pattern"], "pose": smp["pose"],
            }))
            lines.append(f"{model_id} {cloth_id}")
        pairs_file(root, split).write_text("".join(l + "\n" for l in lines))
    cfg_dict = asdict(cfg)
    (root / "synth_config.json").write_text(json.dumps(cfg_dict, indent=2))
    log.info("wrote synthetic dataset (%d train, %d test) to %s", cfg.n_samples, cfg.n_test, root)
    return root


def recorded_warp(manifest, idx):
    """Recorded TPS parameters and visible warped garment of a synthetic sample."""
    model_id = manifest.pairs[idx][0]
    base = Path(manifest.root) / manifest.split
    meta = json.loads((base / "warp" / (Path(model_id).stem + ".json")).read_text())
    warped = _read_rgb(base / "warped-cloth" / model_id, None)
    return np.asarray(meta["theta"]), warped
