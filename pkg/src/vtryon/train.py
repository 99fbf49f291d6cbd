"""Stage-wise training (warp, segmentation, try-on), inference and evaluation."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .core_data import CLASS_NAMES, PriorsConfig, make_priors, texture_priors
from .data import load_split, make_batch, to_tensor
from .embedder import build_embedder
from .metrics import MetricReport, RandomImageEncoder, fid_from_embeddings, inception_score, ms_ssim, psnr, ssim
from .seg import SegNet, class_weights, finalize_mask, pixel_accuracy, weighted_ce
from .tryon import (
    PhasedTrainState, SnapshotManager, TryOnNet, compose, duelling_triplet_loss, in_finetune, tryon_total_loss,
    tt_loss,
)
from .warp import WarpNet, warp_loss

log = logging.getLogger(__name__)

STAGES = ("warp", "seg", "tryon")


class DivergenceError(RuntimeError):
    pass


class MissingCheckpointError(FileNotFoundError):
    def __init__(self, stage, path):
        super().__init__(f"{stage} stage checkpoint not found: {path}")
        self.stage = stage
        self.path = path


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed)


def build_model(stage, cfg):
    if stage == "warp":
        return WarpNet(cfg.resolution, cfg.grid_size, base=cfg.warp_base, use_fine=cfg.use_fine)
    if stage == "seg":
        return SegNet(len(CLASS_NAMES), base=cfg.unet_base)
    if stage == "tryon":
        return TryOnNet(len(CLASS_NAMES), base=cfg.unet_base, use_seg=cfg.use_seg)
    raise ValueError(f"unknown stage {stage!r}")


@dataclass
class Checkpoint:
    stage: str
    step: int
    state_dict: dict
    config: RunConfig
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"stage": self.stage, "step": self.step, "state_dict": self.state_dict,
                    "config": self.config.to_dict(), "history": self.history, "extra": self.extra}, path)
        return path

    @classmethod
    def load(cls, path, stage=None):
        path = Path(path)
        if not path.exists():
            raise MissingCheckpointError(stage or "unknown", path)
        raw = torch.load(path, map_location="cpu", weights_only=False)
        if stage is not None and raw["stage"] != stage:
            raise ValueError(f"{path} holds a {raw['stage']} checkpoint, expected {stage}")
        return cls(raw["stage"], raw["step"], raw["state_dict"], RunConfig.from_dict(raw["config"]),
                   raw.get("history", []), raw.get("extra", {}))

    def model(self):
        net = build_model(self.stage, self.config)
        net.load_state_dict(self.state_dict)
        return net.eval()


def param_hash(model):
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _state_copy(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


class CSVLog:
    def __init__(self, path, columns):
        self.path = Path(path) if path else None
        self.columns = list(columns)
        self.rows = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.columns)

    def write(self, row):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(["" if row.get(c) is None else _fmt(row.get(c)) for c in self.columns])


def _fmt(v):
    if isinstance(v, torch.Tensor):
        v = v.item()
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def batches(n, batch_size, seed, epoch):
    """Index batches for one epoch; order depends only on (seed, epoch)."""
    if batch_size >= n:
        return [list(range(n))]
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


def step_batches(n, batch_size, seed, start=0):
    """Infinite stream of (step, indices), steps counted from 1."""
    per_epoch = max(1, math.ceil(n / batch_size))
    step = start
    while True:
        epoch, j = divmod(step, per_epoch)
        step += 1
        yield step, batches(n, batch_size, seed, epoch)[j]


def _sub(batch, idx):
    return {k: v[idx] for k, v in batch.items()}


def _load_train(cfg, split="train"):
    _, samples = load_split(cfg.data_root, split, resolution=cfg.resolution)
    if not samples:
        raise ValueError(f"no samples in {cfg.data_root} ({split})")
    return samples, make_batch(samples, PriorsConfig())


def _optimizer(cfg, params):
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas)


def _check_finite(loss, stage, step, last_good, cfg, ckpt_path):
    if torch.isfinite(loss):
        return
    if ckpt_path is not None and last_good is not None:
        Checkpoint(stage, last_good[0], last_good[1], cfg).save(ckpt_path)
    raise DivergenceError(f"{stage} loss became non-finite at step {step}; "
                          f"last good weights (step {last_good[0] if last_good else 0}) saved")


def _out_path(cfg, name):
    return Path(cfg.out_dir) / name


# ---------------------------------------------------------------------------
# warp

def evaluate_warp(net, batch, embedder, cfg):
    with torch.no_grad():
        out = net(batch["priors"], batch["cloth"])
        _, parts = warp_loss(out, batch["gt_warp"], embedder, cfg.lambdas, cfg.k, cfg.clamp_push)
    return {k: float(v) for k, v in parts.items()}, out


def train_warp(cfg, ckpt_path=None, log_path=None, data=None):
    """Minimise the warp loss; returns the final checkpoint."""
    seed_everything(cfg.seed)
    samples, batch = data or _load_train(cfg)
    net = build_model("warp", cfg)
    embedder = build_embedder(cfg.embedder)
    opt = _optimizer(cfg, net.parameters())
    steps = cfg.stage_steps("warp", len(samples))
    logger = CSVLog(log_path, ["step", "L_warp", "L_s0", "L_s1", "L_push", "L_align", "L_pgm"])
    initial, _ = evaluate_warp(net, batch, embedder, cfg)
    last_good = None
    t0 = time.time()
    for step, idx in step_batches(len(samples), cfg.batch_size, cfg.seed):
        if step > steps:
            break
        net.train()
        b = _sub(batch, idx)
        out = net(b["priors"], b["cloth"])
        loss, parts = warp_loss(out, b["gt_warp"], embedder, cfg.lambdas, cfg.k, cfg.clamp_push)
        _check_finite(loss, "warp", step, last_good, cfg, ckpt_path)
        opt.zero_grad()
        loss.backward()
        opt.step()
        last_good = (step, _state_copy(net))
        if step % cfg.log_every == 0 or step == steps:
            logger.write({"step": step, **parts})
    final, _ = evaluate_warp(net, batch, embedder, cfg)
    log.info("warp: %d steps in %.1fs, L_warp %.4f -> %.4f", steps, time.time() - t0,
             initial["L_warp"], final["L_warp"])
    ckpt = Checkpoint("warp", steps, _state_copy(net), cfg, logger.rows,
                      {"initial": initial, "final": final})
    if ckpt_path:
        ckpt.save(ckpt_path)
    return ckpt


# ---------------------------------------------------------------------------
# conditional segmentation

def train_segmask(cfg, ckpt_path=None, log_path=None, data=None):
    seed_everything(cfg.seed)
    samples, batch = data or _load_train(cfg)
    net = build_model("seg", cfg)
    weights = class_weights(cfg.class_weights)
    opt = _optimizer(cfg, net.parameters())
    steps = cfg.stage_steps("seg", len(samples))
    logger = CSVLog(log_path, ["step", "L_ce", "pixel_acc"])
    last_good = None
    for step, idx in step_batches(len(samples), cfg.batch_size, cfg.seed):
        if step > steps:
            break
        net.train()
        b = _sub(batch, idx)
        logits = net(b["priors"], b["cloth"])
        loss = weighted_ce(logits, b["labels"], weights)
        _check_finite(loss, "seg", step, last_good, cfg, ckpt_path)
        opt.zero_grad()
        loss.backward()
        opt.step()
        last_good = (step, _state_copy(net))
        if step % cfg.log_every == 0 or step == steps:
            acc = pixel_accuracy(finalize_mask(logits.detach()), b["labels"])
            logger.write({"step": step, "L_ce": loss.detach(), "pixel_acc": acc})
    net.eval()
    with torch.no_grad():
        acc = pixel_accuracy(finalize_mask(net(batch["priors"], batch["cloth"])), batch["labels"])
    log.info("seg: %d steps, train pixel accuracy %.4f", steps, acc)
    ckpt = Checkpoint("seg", steps, _state_copy(net), cfg, logger.rows, {"pixel_accuracy": acc})
    if ckpt_path:
        ckpt.save(ckpt_path)
    return ckpt


# ---------------------------------------------------------------------------
# texture translation

def upstream_inputs(warp_net, seg_net, batch):
    """Warped cloth and expected-mask one-hot from the frozen upstream stages."""
    with torch.no_grad():
        out = warp_net(batch["priors"], batch["cloth"])
        labels = finalize_mask(seg_net(batch["priors"], batch["cloth"]))
        onehot = torch.nn.functional.one_hot(labels, len(CLASS_NAMES)).permute(0, 3, 1, 2).float()
    return out.fine, onehot, labels


def train_tryon(cfg, warp_ckpt, seg_ckpt, ckpt_path=None, log_path=None, data=None, resume=None):
    """Conditioning phase on ``L_tt``, then duelling-triplet fine-tuning.

    ``resume`` continues from a try-on checkpoint, restoring the optimizer
    and the negative-snapshot registry.
    """
    seed_everything(cfg.seed)
    samples, batch = data or _load_train(cfg)
    warp_net = _as_model(warp_ckpt, "warp")
    seg_net = _as_model(seg_ckpt, "seg")
    hashes = (param_hash(warp_net), param_hash(seg_net))
    warped, onehot, _ = upstream_inputs(warp_net, seg_net, batch)
    net = build_model("tryon", cfg)
    embedder = build_embedder(cfg.embedder)
    opt = _optimizer(cfg, net.parameters())
    steps = cfg.stage_steps("tryon", len(samples))
    K, T = cfg.schedule(len(samples))
    state = PhasedTrainState(K, T)
    history = []
    if resume is not None:
        net.load_state_dict(resume.state_dict)
        opt.load_state_dict(resume.extra["optimizer"])
        state.step = resume.step
        for key, sd in resume.extra.get("registry", {}).items():
            snap = build_model("tryon", cfg)
            snap.load_state_dict(sd)
            for p in snap.parameters():
                p.requires_grad_(False)
            state.registry[int(key)] = snap.eval()
        history = list(resume.history)
    manager = SnapshotManager(state)
    logger = CSVLog(log_path, ["step", "phase", "snapshot", "negative_step", "L_tryon", "L_tt", "L_l1",
                               "L_percep", "L_mask", "L_d", "D_pos", "D_neg"])
    last_good = None
    for _, idx in step_batches(len(samples), cfg.batch_size, cfg.seed, start=state.step):
        if state.step >= steps:
            break
        net.train()
        step, taken = manager.advance(net)
        b = _sub(batch, idx)
        w, oh = warped[idx], onehot[idx]
        out = net(w, oh, b["priors_tt"])
        tryon = compose(out, w)
        l_tt, parts = tt_loss(tryon, b["model"], out.comp_mask, b["cloth_mask"], embedder)
        row = {"step": step, "phase": state.phase, "snapshot": int(taken), **parts}
        l_d = None
        if in_finetune(step, state.K):
            neg = manager.negative()
            with torch.no_grad():
                neg_out = neg(w, oh, b["priors_tt"])
                tryon_prev = compose(neg_out, w)
            l_d, dparts = duelling_triplet_loss(tryon, tryon_prev, b["model"])
            row.update(negative_step=state.negative_step(), L_d=l_d.detach(), **dparts)
        loss = tryon_total_loss(step, state.K, l_tt, l_d)
        row["L_tryon"] = loss.detach()
        _check_finite(loss, "tryon", step, last_good, cfg, ckpt_path)
        opt.zero_grad()
        loss.backward()
        opt.step()
        last_good = (step, _state_copy(net))
        if step % cfg.log_every == 0 or step == steps or taken:
            logger.write(row)
    if (param_hash(warp_net), param_hash(seg_net)) != hashes:
        raise RuntimeError("upstream stage weights changed during try-on training")
    net.eval()
    with torch.no_grad():
        out = net(warped, onehot, batch["priors_tt"])
        l1 = (compose(out, warped) - batch["model"]).abs().mean().item()
    log.info("tryon: %d steps (K=%s, T=%s), train L1 %.4f", steps, K, T, l1)
    extra = {"train_l1": l1, "K": K, "T": T, "phase": state.phase, "optimizer": opt.state_dict(),
             "registry": {k: _state_copy(v) for k, v in state.registry.items()},
             "upstream_hashes": hashes}
    ckpt = Checkpoint("tryon", state.step, _state_copy(net), cfg, history + logger.rows, extra)
    if ckpt_path:
        ckpt.save(ckpt_path)
    return ckpt


def _as_model(ckpt, stage):
    if isinstance(ckpt, (str, Path)):
        ckpt = Checkpoint.load(ckpt, stage)
    if ckpt is None:
        raise MissingCheckpointError(stage, None)
    net = ckpt.model()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


# ---------------------------------------------------------------------------
# inference

class TryOnPipeline:
    """priors -> warp -> expected mask -> texture translation -> composition.

    The target's own worn-garment mask never enters: only the pose, the
    coarse body shape and the untouched regions (face, bottoms) are read
    from the person.
    """

    def __init__(self, warp_ckpt, seg_ckpt, tryon_ckpt):
        self.warp = _as_model(warp_ckpt, "warp")
        self.seg = _as_model(seg_ckpt, "seg")
        self.tryon = _as_model(tryon_ckpt, "tryon")

    @classmethod
    def from_dir(cls, directory):
        d = Path(directory)
        return cls(d / "warp.pt", d / "seg.pt", d / "tryon.pt")

    @torch.no_grad()
    def run_batch(self, priors, cloth, priors_tt):
        out = self.warp(priors, cloth)
        labels = finalize_mask(self.seg(priors, cloth))
        onehot = torch.nn.functional.one_hot(labels, len(CLASS_NAMES)).permute(0, 3, 1, 2).float()
        tt = self.tryon(out.fine, onehot, priors_tt)
        return {"coarse": out.coarse, "fine": out.fine, "exp_mask": labels, "rendered": tt.rendered,
                "comp_mask": tt.comp_mask, "tryon": compose(tt, out.fine)}

    def __call__(self, samples, priors_config=None):
        priors, cloth, ptt = [], [], []
        for s in samples:
            priors.append(torch.from_numpy(make_priors(s.pose, s.gt_seg, priors_config)))
            pmask = s.product_mask if s.product_mask is not None else np.ones(s.resolution, np.float32)
            cloth.append(to_tensor(s.product_image * pmask[..., None]))
            ptt.append(to_tensor(texture_priors(s.model_image, s.gt_seg)))
        return self.run_batch(torch.stack(priors), torch.stack(cloth), torch.stack(ptt))


def infer(samples, warp_ckpt, seg_ckpt, tryon_ckpt):
    """Try-on images ``(N, H, W, 3)`` in the unit range."""
    res = TryOnPipeline(warp_ckpt, seg_ckpt, tryon_ckpt)(samples)
    return res["tryon"].permute(0, 2, 3, 1).numpy()


# ---------------------------------------------------------------------------
# evaluation

def image_report(generated, reference, unpaired_generated=None, encoder=None, label=""):
    """Paired SSIM / MS-SSIM / PSNR plus FID and IS on (unpaired) generations."""
    encoder = encoder or RandomImageEncoder()
    gen = list(unpaired_generated if unpaired_generated is not None else generated)
    s = float(np.mean([ssim(a, b) for a, b in zip(generated, reference)]))
    ms = float(np.mean([ms_ssim(a, b) for a, b in zip(generated, reference)]))
    p = float(np.mean([psnr(a, b) for a, b in zip(generated, reference)]))
    f = fid_from_embeddings(encoder.embed(reference), encoder.embed(gen))
    is_mean, is_std = inception_score(gen, encoder, splits=1)
    return MetricReport(s, ms, p, f, is_mean, is_std, len(generated), label)


def evaluate(cfg, ckpts, split="test", label=""):
    """Metrics of the full pipeline on ``split``: paired for SSIM/MS-SSIM/PSNR,
    unpaired (deranged cloth) generations for FID/IS."""
    pipe = ckpts if isinstance(ckpts, TryOnPipeline) else TryOnPipeline(*ckpts)
    _, paired = load_split(cfg.data_root, split, paired=True, resolution=cfg.resolution)
    gen = pipe(paired)["tryon"].permute(0, 2, 3, 1).numpy()
    ref = [s.model_image for s in paired]
    unpaired_gen = None
    if len(paired) > 1:
        _, unpaired = load_split(cfg.data_root, split, paired=False, resolution=cfg.resolution, seed=cfg.seed)
        unpaired_gen = pipe(unpaired)["tryon"].permute(0, 2, 3, 1).numpy()
    return image_report(list(gen), ref, unpaired_gen, label=label)


ABLATIONS = {
    "coarse+TOM": dict(use_fine=False, use_seg=False, K=math.inf),
    "coarse+SATT": dict(use_fine=False, use_seg=True, K=math.inf),
    "C2F+SATT": dict(use_fine=True, use_seg=True, K=math.inf),
    "C2F+SATT-D": dict(use_fine=True, use_seg=True),
}


def run_ablation(cfg, split="test", presets=None, data=None, warps=None, seg=None, tryons=None):
    """Train each preset's stages (sharing identical upstream runs) and evaluate.

    Already trained checkpoints may be passed in: ``warps`` keyed by
    ``use_fine``, ``seg``, and ``tryons`` keyed by preset label. They must
    come from ``cfg`` with the preset's overrides applied.
    Returns ``{label: MetricReport}``. New checkpoints go under ``out_dir/ablation``.
    """
    presets = presets or list(ABLATIONS)
    data = data or _load_train(cfg)
    root = Path(cfg.out_dir) / "ablation"
    warps, segs, tryons, reports = dict(warps or {}), seg, dict(tryons or {}), {}
    for label in presets:
        pcfg = cfg.replace(**ABLATIONS[label])
        if pcfg.use_fine not in warps:
            tag = "c2f" if pcfg.use_fine else "coarse"
            warps[pcfg.use_fine] = train_warp(pcfg, root / f"warp_{tag}.pt", root / f"warp_{tag}.csv", data)
        if segs is None:
            segs = train_segmask(pcfg, root / "seg.pt", root / "seg.csv", data)
        if label not in tryons:
            safe = label.replace("+", "_")
            tryons[label] = train_tryon(pcfg, warps[pcfg.use_fine], segs, root / f"tryon_{safe}.pt",
                                        root / f"tryon_{safe}.csv", data)
        reports[label] = evaluate(pcfg, TryOnPipeline(warps[pcfg.use_fine], segs, tryons[label]), split, label)
        log.info("ablation %s: SSIM %.4f", label, reports[label].ssim)
    return reports
