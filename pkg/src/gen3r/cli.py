"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .io import read_json, read_ply, read_png, read_pose_vectors, write_json

log = logging.getLogger("gen3r")

MODE_ALIASES = {"1-view": "first-frame", "2-view": "first+last", "first-frame": "first-frame", "first+last": "first+last"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. sampler.steps=30")
    p.add_argument("--run-dir", type=Path)
    p.add_argument("--data", type=Path, help="dataset root (default: $GEN3R_DATA_DIR or config)")


def _sampler(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-scale", type=float)


def _scenes(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--scene", action="append", help="scene id (repeatable)")
    g.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", type=Path, required=True)


def build_parser():
    ap = _Parser(prog="gen3r", description="Joint RGB and geometry generation at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="render a synthetic multi-view dataset")
    p.add_argument("--out", type=Path, help="dataset root (default: $GEN3R_DATA_DIR)")
    p.add_argument("--count", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--frames", type=int, default=9)

    p = sub.add_parser("train", help="run one training stage (or all)")
    _common(p)
    p.add_argument("--stage", required=True)
    p.add_argument("--force", action="store_true", help="retrain even if the stage exists with another config")

    for name, helptext in (("generate", "1-view / 2-view generation"), ("reconstruct", "all-frames reconstruction"),
                           ("baseline-2stage", "RGB-only generation followed by the frozen surrogate")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _sampler(p)
        _scenes(p)
        if name != "reconstruct":
            p.add_argument("--mode", choices=sorted(MODE_ALIASES), default="1-view")
            p.add_argument("--with-cameras", action="store_true", help="condition on the scene's cameras")

    p = sub.add_parser("evaluate", help="score result directories against a dataset")
    p.add_argument("--pred", type=Path, required=True, help="directory of per-scene result folders")
    p.add_argument("--gt", type=Path, help="dataset root (default: $GEN3R_DATA_DIR)")
    p.add_argument("--out", type=Path, help="report directory (default: --pred)")
    p.add_argument("--sample-k", type=int, default=2000)

    p = sub.add_parser("report-plots", help="loss-curve and metric-bar figures")
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--report", action="append", default=[], metavar="NAME=PATH", help="report.json to compare (repeatable)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("inspect-latents", help="channel statistics of geometry vs appearance latents")
    _common(p)
    p.add_argument("--adapter", action="append", default=None, help="adapter stage name (repeatable)")
    p.add_argument("--out", type=Path, required=True)
    return ap


def _load_config(args):
    from .pipeline import ExperimentConfig

    overrides = list(args.overrides)
    extra = {}
    if args.run_dir is not None:
        extra["run_dir"] = str(args.run_dir)
    data = args.data or (Path(os.environ["GEN3R_DATA_DIR"]) if os.environ.get("GEN3R_DATA_DIR") else None)
    if data is not None:
        extra["data"] = {"root": str(data)}
    cfg = ExperimentConfig.load(args.config, [extra] if extra else [])
    # explicit --set wins over everything
    return ExperimentConfig.load(None, [cfg.values, *overrides]) if overrides else cfg


def _scene_ids(args, ds):
    if args.scene:
        missing = [s for s in args.scene if not (ds.root / s).exists()]
        if missing:
            raise FileNotFoundError(f"unknown scene(s): {', '.join(missing)}")
        return args.scene
    if args.split == "all":
        return ds.train_ids + ds.test_ids
    return ds.train_ids if args.split == "train" else ds.test_ids


def cmd_synth(args):
    from .scene_synth import make_dataset

    out = args.out or (Path(os.environ["GEN3R_DATA_DIR"]) if os.environ.get("GEN3R_DATA_DIR") else None)
    if out is None:
        raise UsageError("synth-data: --out is required when GEN3R_DATA_DIR is unset")
    ds = make_dataset(out, args.count, args.seed, (args.resolution, args.resolution), args.frames)
    print(f"wrote {len(ds.train_ids)} train / {len(ds.test_ids)} test scenes to {out}")
    if ds.warning:
        print(f"warning: {ds.warning}", file=sys.stderr)


def cmd_train(args):
    from .pipeline import ABLATIONS, PIPELINE, STAGES, run_stage

    cfg = _load_config(args)
    stages = list(PIPELINE + ABLATIONS) if args.stage == "all" else [args.stage]
    for s in stages:
        if s not in STAGES:
            raise UsageError(f"train: unknown stage {s!r} (choose from {', '.join(STAGES)} or all)")
    for s in stages:
        entry = run_stage(s, cfg, force=args.force)
        print(f"{s}\t{entry['status']}\t{entry['config_hash']}\t{entry['artifact']}")


def cmd_infer(args):
    from .pipeline import Artifacts, generate, reconstruct, two_stage_baseline, write_result

    cfg = _load_config(args)
    from .pipeline import ensure_dataset

    ds = ensure_dataset(cfg)
    art = Artifacts(cfg)
    sampler = {"seed": args.seed, "steps": args.steps, "cfg_scale": args.cfg_scale}
    for sid in _scene_ids(args, ds):
        seq = ds.load(sid)
        extra = {"scene": sid}
        if args.command == "reconstruct":
            res = reconstruct(art, seq.images, sampler=sampler, extra=extra)
        else:
            mode = MODE_ALIASES[args.mode]
            imgs = seq.images[[0]] if mode == "first-frame" else seq.images[[0, -1]]
            cams = seq.camera_vectors if args.with_cameras else None
            fn = generate if args.command == "generate" else two_stage_baseline
            res = fn(art, imgs, cams, mode, sampler=sampler, extra=extra)
        write_result(res, args.out / sid)
        print(f"{sid}\t{args.out / sid}")


def evaluate_results(pred_dir, gt_root, sample_k: int = 2000):
    """Build a MetricReport from <pred_dir>/<scene>/ result folders."""
    from .metrics import MetricReport, evaluate_geometry, evaluate_poses, sequence_psnr, sequence_ssim
    from .pipeline import gt_cloud
    from .scene_synth import SceneDataset

    ds = SceneDataset(gt_root)
    pred_dir = Path(pred_dir)
    rows = []
    hashes = set()
    for d in sorted(p for p in pred_dir.iterdir() if (p / "provenance.json").exists()):
        prov = read_json(d / "provenance.json")
        sid = prov.get("scene", d.name)
        seq = ds.load(sid)
        frames = np.stack([read_png(f) for f in sorted((d / "frames").glob("*.png"))])
        acc, comp, cd = evaluate_geometry(read_ply(d / "cloud.ply"), gt_cloud(seq), sample_k)
        rows.append({
            "scene": sid,
            "result_dir": d.name,
            "psnr": sequence_psnr(frames, seq.images),
            "ssim": sequence_ssim(frames, seq.images),
            "accuracy": acc,
            "completeness": comp,
            "cd": cd,
            "auc30": evaluate_poses(read_pose_vectors(d / "poses.json"), seq.camera_vectors),
        })
        hashes.add(prov.get("config_hash", ""))
    if not rows:
        raise FileNotFoundError(f"no result folders under {pred_dir}")
    return MetricReport(rows, config_hash=",".join(sorted(hashes)), extra={"sample_k": sample_k})


def cmd_evaluate(args):
    gt = args.gt or (Path(os.environ["GEN3R_DATA_DIR"]) if os.environ.get("GEN3R_DATA_DIR") else None)
    if gt is None:
        raise UsageError("evaluate: --gt is required when GEN3R_DATA_DIR is unset")
    report = evaluate_results(args.pred, gt, args.sample_k)
    path = report.write(args.out or args.pred)
    agg = report.aggregate
    print(f"wrote {path}")
    print(",".join(f"{k}={v:.4f}" for k, v in agg.items() if v is not None))


def cmd_plots(args):
    from .pipeline import STAGES
    from .plotting import plot_loss_curves, plot_metric_bars

    curves = {s: args.run_dir / "logs" / f"{s}_loss.csv" for s in STAGES}
    written = [plot_loss_curves(curves, args.out / "loss_curves.png")]
    reports = {}
    for item in args.report:
        if "=" not in item:
            raise UsageError(f"report-plots: --report expects NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        reports[name] = read_json(path)
    if reports:
        for metric in ("cd", "psnr", "auc30"):
            written.append(plot_metric_bars(reports, metric, args.out / f"metric_{metric}.png"))
    for w in written:
        print(w)


def cmd_inspect(args):
    import torch

    from .geometry_adapter import alignment_gate
    from .pipeline import Artifacts, appearance_latents, ensure_dataset, geometry_latents
    from .plotting import plot_latent_stats

    cfg = _load_config(args)
    ds = ensure_dataset(cfg)
    art = Artifacts(cfg)
    seqs = [ds.load(s) for s in ds.train_ids]
    prior = art.prior()
    stages = args.adapter or ["adapter", "adapter-nokl"]
    table = {"appearance": alignment_gate(appearance_latents(art.codec(), seqs), prior).to_dict()}
    for st in stages:
        with torch.no_grad():
            G = geometry_latents(art.surrogate(), art.adapter(st), seqs)
        table[st] = alignment_gate(G, prior).to_dict()
    args.out.mkdir(parents=True, exist_ok=True)
    write_json(args.out / "latent_stats.json", {"config_hash": cfg.hash, "prior": prior.to_dict(), "sources": table})
    with open(args.out / "latent_stats.csv", "w") as fh:
        fh.write("source,channel,mean_offset_sigma,var_ratio\n")
        for name, g in table.items():
            for ch, (o, r) in enumerate(zip(g["mean_offsets_sigma"], g["var_ratios"])):
                fh.write(f"{name},{ch},{o:.6g},{r:.6g}\n")
    plot_latent_stats(table, args.out / "latent_stats.png")
    for name, g in table.items():
        print(f"{name}\tmeans_ok={g['means_ok']}\tvars_ok={g['vars_ok']}\tmax_offset={max(g['mean_offsets_sigma']):.3f}")


COMMANDS = {
    "synth-data": cmd_synth,
    "train": cmd_train,
    "generate": cmd_infer,
    "reconstruct": cmd_infer,
    "baseline-2stage": cmd_infer,
    "evaluate": cmd_evaluate,
    "report-plots": cmd_plots,
    "inspect-latents": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
        return 0
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
