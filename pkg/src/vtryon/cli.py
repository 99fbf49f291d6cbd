"""Command line entry point: ``vtryon <subcommand> [--config cfg.json] [--key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .config import RunConfig, apply_overrides
from .core_data import CLASS_NAMES

log = logging.getLogger("vtryon")


def _config(args, extra):
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, extra)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return cfg, out


def cmd_synth(args, extra):
    from .data import SynthConfig, synth_generate

    if extra:
        raise SystemExit(f"unexpected arguments: {' '.join(extra)}")
    cfg = SynthConfig(seed=args.seed, n_samples=args.n_samples, n_test=args.n_test,
                      resolution=tuple(int(v) for v in args.resolution.split(",")),
                      garment_patterns=tuple(args.patterns.split(",")), pose_jitter=args.pose_jitter)
    synth_generate(cfg, args.out)
    print(args.out)


def cmd_train_warp(args, extra):
    from .embedder import build_embedder
    from .report import loss_curves, warp_visualization
    from .train import _load_train, evaluate_warp, train_warp

    cfg, out = _config(args, extra)
    data = _load_train(cfg)
    ckpt = train_warp(cfg, out / "warp.pt", out / "warp.csv", data)
    loss_curves(out / "warp.csv", out / "warp_loss.png", ["L_warp", "L_s0", "L_s1", "L_push", "L_align"])
    if args.visualize:
        _, batch = data
        _, res = evaluate_warp(ckpt.model(), batch, build_embedder(cfg.embedder), cfg)
        warp_visualization(batch["cloth"], res.coarse, res.fine, batch["gt_warp"], out / "warp_vis.png")
    print(json.dumps({"checkpoint": str(out / "warp.pt"), **ckpt.extra["final"]}))


def cmd_train_seg(args, extra):
    from .report import loss_curves
    from .train import train_segmask

    cfg, out = _config(args, extra)
    ckpt = train_segmask(cfg, out / "seg.pt", out / "seg.csv")
    loss_curves(out / "seg.csv", out / "seg_loss.png", ["L_ce"])
    print(json.dumps({"checkpoint": str(out / "seg.pt"), **ckpt.extra}))


def cmd_train_tryon(args, extra):
    from .report import loss_curves
    from .train import Checkpoint, train_tryon

    cfg, out = _config(args, extra)
    resume = Checkpoint.load(args.resume, "tryon") if args.resume else None
    ckpt = train_tryon(cfg, args.warp_ckpt or out / "warp.pt", args.seg_ckpt or out / "seg.pt",
                       out / "tryon.pt", out / "tryon.csv", resume=resume)
    loss_curves(out / "tryon.csv", out / "tryon_loss.png", ["L_tryon", "L_tt", "L_d"])
    print(json.dumps({"checkpoint": str(out / "tryon.pt"), "train_l1": ckpt.extra["train_l1"],
                      "K": ckpt.extra["K"], "T": ckpt.extra["T"]}))


def _pipeline(args, out):
    from .train import TryOnPipeline

    d = Path(args.ckpt_dir) if args.ckpt_dir else out
    return TryOnPipeline(args.warp_ckpt or d / "warp.pt", args.seg_ckpt or d / "seg.pt",
                         args.tryon_ckpt or d / "tryon.pt")


def cmd_infer(args, extra):
    from .core_data import SegMask
    from .data import load_split
    from .report import save_png, tryon_visualization
    from .seg import PALETTE

    cfg, out = _config(args, extra)
    pipe = _pipeline(args, out)
    _, samples = load_split(cfg.data_root, args.split, paired=not args.unpaired, resolution=cfg.resolution,
                            seed=cfg.seed)
    res = pipe(samples)
    dest = Path(args.output or out / "tryon")
    dest.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = Path(s.model_id).stem + "__" + Path(s.cloth_id).stem
        save_png(res["tryon"][i], dest / f"{stem}.png")
        if args.save_mask:
            SegMask(res["exp_mask"][i].numpy()).to_png(dest / f"{stem}_mask.png")
    if args.save_mask:
        (dest / "palette.json").write_text(json.dumps(
            {name: PALETTE[i].tolist() for i, name in enumerate(CLASS_NAMES)}, indent=2))
    tryon_visualization(res, [s.product_image for s in samples], [s.model_image for s in samples],
                        dest / "overview.png")
    print(dest)


def cmd_evaluate(args, extra):
    from .metrics import reports_to_csv
    from .report import ablation_bars, loss_curves, tryon_visualization
    from .data import load_split
    from .train import evaluate, run_ablation

    cfg, out = _config(args, extra)
    if args.ablation:
        reports = run_ablation(cfg, args.split)
        (out / "ablation.csv").write_text(reports_to_csv(reports.values()))
        (out / "ablation.json").write_text(json.dumps({k: json.loads(r.to_json()) for k, r in reports.items()},
                                                      indent=2))
        ablation_bars(reports, out / "ablation_ssim.png")
        sys.stdout.write(reports_to_csv(reports.values()))
        return
    pipe = _pipeline(args, out)
    report = evaluate(cfg, pipe, args.split, label=args.label)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(reports_to_csv([report]))
    _, samples = load_split(cfg.data_root, args.split, resolution=cfg.resolution)
    tryon_visualization(pipe(samples), [s.product_image for s in samples], [s.model_image for s in samples],
                        out / f"{args.split}_tryon.png")
    for stage, cols in (("warp", ["L_warp", "L_s0", "L_s1"]), ("seg", ["L_ce"]), ("tryon", ["L_tryon", "L_d"])):
        if (out / f"{stage}.csv").exists():
            loss_curves(out / f"{stage}.csv", out / f"{stage}_loss.png", cols)
    sys.stdout.write(reports_to_csv([report]))


def build_parser():
    p = argparse.ArgumentParser(prog="vtryon", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic dataset in the VITON layout")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-samples", type=int, default=8)
    s.add_argument("--n-test", type=int, default=4)
    s.add_argument("--resolution", default="64,48", help="H,W")
    s.add_argument("--patterns", default="stripes,checker,glyphs,solid")
    s.add_argument("--pose-jitter", type=float, default=0.02)
    s.set_defaults(func=cmd_synth)

    def staged(name, func, help):
        q = sub.add_parser(name, help=help)
        q.add_argument("--config", help="JSON RunConfig; fields may be overridden with --key=value")
        q.set_defaults(func=func)
        return q

    q = staged("train-warp", cmd_train_warp, "train the coarse-to-fine warp")
    q.add_argument("--visualize", action="store_true", help="dump a coarse/fine/ground-truth grid image")
    staged("train-segmask", cmd_train_seg, "train the conditional segmentation net")
    q = staged("train-tryon", cmd_train_tryon, "train texture translation with the duelling schedule")
    q.add_argument("--warp-ckpt")
    q.add_argument("--seg-ckpt")
    q.add_argument("--resume", help="try-on checkpoint to continue from")
    for name, func, help in (("infer", cmd_infer, "run the full pipeline on a split"),
                             ("evaluate", cmd_evaluate, "compute SSIM/MS-SSIM/FID/PSNR/IS")):
        q = staged(name, func, help)
        q.add_argument("--ckpt-dir")
        q.add_argument("--warp-ckpt")
        q.add_argument("--seg-ckpt")
        q.add_argument("--tryon-ckpt")
        q.add_argument("--split", default="test")
        if name == "infer":
            q.add_argument("--unpaired", action="store_true")
            q.add_argument("--output")
            q.add_argument("--save-mask", action="store_true", help="also write expected masks + palette")
        else:
            q.add_argument("--ablation", action="store_true", help="train and score the four ablation presets")
            q.add_argument("--label", default="C2F+SATT-D")
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from .train import MissingCheckpointError

    try:
        args.func(args, extra)
    except MissingCheckpointError as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
