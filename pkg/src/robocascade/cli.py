"""Command-line entry point: gen, train-seg, train-joints, eval, infer."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .jointnet import JointNetConfig, load_jointnet, overlay, select_points, train_jointnet
from .kinematics import load_chain
from .masknet import MaskNetConfig, TrainingDiverged, load_masknet, train_masknet
from .neuralcore import save_checkpoint
from .pipeline import NetSegmenter, _subset, build_reports, render_joint_overlay, results_table, run_cascade
from .scene import (
    DESK_RESOLUTION,
    FULL_RESOLUTION,
    CameraModel,
    GeneratorConfig,
    SampleRejected,
    generate_dataset,
    load_color,
    load_split,
    read_manifest,
    recording_summary,
)
from .schemas import validate_eval

log = logging.getLogger("robocascade")

# Per-recording sample counts of the reference corpus, by robot preset.
REFERENCE_COUNTS = {
    "ur3like": [211, 252, 463],
    "ur5like": [252, 756, 1512],
    "ur10like": [112, 278, 514],
}

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class CliError(Exception):
    pass


def _versions() -> dict:
    return {"robocascade": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _prepare_run_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CliError(f"{out} already exists and is not empty (use --force to replace it)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_run_config(out: Path, command: str, resolved: dict) -> None:
    _write_json(out / "config.json", {"command": command, "resolved": resolved, "versions": _versions()})


def _split_counts(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + (1 if i >= n - extra else 0) for i in range(n)]


def _parse_list(text: str | None, kind):
    if text is None:
        return None
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"cannot parse list {text!r}") from None


# --- commands --------------------------------------------------------------

def cmd_gen(args) -> int:
    if args.recordings < 1:
        raise CliError("--recordings must be at least 1")
    chain = load_chain(args.robot)
    counts = _parse_list(args.counts, int)
    steps = _parse_list(args.steps, float)
    if counts and steps:
        raise CliError("--counts and --steps are mutually exclusive")
    for given in (counts, steps):
        if given is not None and len(given) != args.recordings:
            raise CliError(f"expected {args.recordings} comma-separated values, got {len(given)}")
    if not counts and not steps:
        if args.profile == "full" and chain.name in REFERENCE_COUNTS and args.recordings == 3 and args.samples is None:
            counts = list(REFERENCE_COUNTS[chain.name])
        else:
            total = 300 if args.samples is None else args.samples
            if total < args.recordings:
                raise CliError("--samples must be at least the number of recordings")
            counts = _split_counts(total, args.recordings)
    if args.resolution:
        try:
            width, height = (int(v) for v in args.resolution.lower().split("x"))
        except ValueError:
            raise CliError(f"--resolution must look like 128x106, got {args.resolution!r}") from None
    else:
        width, height = FULL_RESOLUTION if args.profile == "full" else DESK_RESOLUTION
    cfg = GeneratorConfig(robot=chain.name, counts=counts, steps=steps, seed=args.seed, width=width,
                          height=height, backgrounds=args.backgrounds)
    out = _prepare_run_dir(args.out, args.force)
    manifest = generate_dataset(cfg, chain, out)
    _write_run_config(out, "gen", {"generator": cfg.to_dict(), "chain": chain.to_dict()})
    rows = recording_summary(manifest)
    print(f"{'Recording':<10} | {'Robot Type':<10} | Number of Samples")
    for rec, robot, n in rows:
        print(f"{rec:<10} | {robot:<10} | {n}")
    total = sum(n for _, _, n in rows)
    print(f"{'Total':<10} | {'':<10} | {total}")
    print(f"train {len(manifest['splits']['train'])} / test {len(manifest['splits']['test'])}", file=sys.stderr)
    return EXIT_OK


def _write_curve(path: Path, header: list[str], curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in curve:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _progress(every: int):
    def report(epoch, loss, lr):
        if epoch % every == 0:
            log.info("epoch %d loss %.6f lr %.3g", epoch, loss, lr)
    return report


def _load_dataset(path):
    root = Path(path)
    try:
        manifest = read_manifest(root)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from None
    return root, manifest


def cmd_train_seg(args) -> int:
    root, manifest = _load_dataset(args.data)
    cfg = MaskNetConfig.profile(args.profile, epochs=args.epochs, batch_size=args.batch_size,
                                lr_start=args.lr_start, lr_end=args.lr_end)
    train = load_split(root, manifest, "train", (cfg.width, cfg.height))
    if args.limit:
        train = _head(train, args.limit)
    resolved = {"data": str(root), "seed": args.seed, "profile": args.profile, "model": cfg.to_dict(),
                "train_samples": len(train.ids)}
    if args.dry_run:
        print(json.dumps(resolved, indent=2))
        return EXIT_OK
    out = _prepare_run_dir(args.out, args.force)
    _write_run_config(out, "train-seg", resolved)
    result = train_masknet(train.colors, train.masks, cfg, seed=args.seed, progress=_progress(args.log_every))
    save_checkpoint(result.net, out, {"model": "masknet", "config": cfg.to_dict(), "seed": args.seed})
    _write_curve(out / "loss.csv", ["epoch", "mean_loss", "lr"], result.curve)
    first, last = result.curve[0][1], result.curve[-1][1]
    print(f"mask network: loss {first:.4f} -> {last:.4f} over {cfg.epochs} epochs ({result.seconds:.0f} s)")
    return EXIT_OK


def cmd_train_joints(args) -> int:
    root, manifest = _load_dataset(args.data)
    cfg = JointNetConfig.profile(args.profile, epochs=args.epochs, batch_size=args.batch_size,
                                 lr_start=args.lr_start, lr_end=args.lr_end)
    train = load_split(root, manifest, "train", (cfg.width, cfg.height))
    if args.limit:
        train = _head(train, args.limit)
    k_all = train.joints.shape[1]
    cfg.n_points = k_all if args.points == "all" else k_all - 1
    resolved = {"data": str(root), "seed": args.seed, "profile": args.profile, "model": cfg.to_dict(),
                "train_samples": len(train.ids), "points": args.points}
    if args.dry_run:
        print(json.dumps(resolved, indent=2))
        return EXIT_OK
    out = _prepare_run_dir(args.out, args.force)
    _write_run_config(out, "train-joints", resolved)
    result = train_jointnet(overlay(train.colors, train.masks), train.joints, cfg, seed=args.seed,
                            progress=_progress(args.log_every))
    intr = train.cameras[0]
    meta = {
        "model": "jointnet",
        "config": cfg.to_dict(),
        "seed": args.seed,
        "normalization": result.norm.to_dict(),
        "intrinsics": {k: v for k, v in intr.to_dict().items() if k not in ("rotation", "translation")},
        "train_centroid": select_points(train.joints, cfg.n_points).mean(axis=0).tolist(),
    }
    save_checkpoint(result.net, out, meta)
    _write_curve(out / "loss.csv", ["epoch", "mean_loss_m", "lr", "momentum"], result.curve)
    first, last = result.curve[0][1], result.curve[-1][1]
    print(f"joint network: loss {first * 100:.2f} cm -> {last * 100:.2f} cm over {cfg.epochs} epochs "
          f"({result.seconds:.0f} s)")
    return EXIT_OK


def _head(split, n):
    return _subset(split, list(range(min(n, len(split.ids)))))


def cmd_eval(args) -> int:
    root, manifest = _load_dataset(args.data)
    metrics = ("mask", "separate", "full") if args.only is None else (args.only,)
    seg_net = joint_net = norm = None
    if {"mask", "full"} & set(metrics):
        if not args.seg:
            raise CliError("--seg is required for mask and full-system metrics")
        seg_net, _ = load_masknet(args.seg)
    if {"separate", "full"} & set(metrics):
        if not args.joints:
            raise CliError("--joints is required for joint metrics")
        joint_net, norm, _ = load_jointnet(args.joints)
    splits = manifest.get("splits") or {}
    if not splits.get("test"):
        raise CliError("dataset has no test split; refusing to evaluate on training data")
    net = seg_net or joint_net
    _, h, w = net.input_shape
    test = load_split(root, manifest, "test", (w, h))
    train_joints = None
    if joint_net is not None:
        train_joints = load_split(root, manifest, "train", (w, h)).joints
    segmenter = NetSegmenter(seg_net) if seg_net is not None else None
    reports = build_reports(test, splits.get("train", []), segmenter=segmenter, joint_net=joint_net, norm=norm,
                            train_joints=train_joints, metrics=metrics, threshold=args.threshold)
    out = _prepare_run_dir(args.out, args.force)
    _write_run_config(out, "eval", {"data": str(root), "seg": args.seg, "joints": args.joints,
                                    "metrics": list(metrics), "threshold": args.threshold})
    doc = {"format": "robocascade-eval/1", "reports": [r.to_dict() for r in reports]}
    validate_eval(doc)
    _write_json(out / "report.json", doc)
    csv_text, text = results_table(reports)
    (out / "table.csv").write_text(csv_text, encoding="utf-8")
    (out / "table.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_infer(args) -> int:
    seg_net, _ = load_masknet(args.seg)
    joint_net, norm, meta = load_jointnet(args.joints)
    _, h, w = seg_net.input_shape
    try:
        color = load_color(args.image, (w, h))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image {args.image}: {exc}") from None
    result = run_cascade(seg_net, joint_net, norm, color, threshold=args.threshold)
    for i, p in enumerate(result.joints):
        print(f"joint_{i} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    if args.overlay:
        full = load_color(args.image)
        if args.camera:
            doc = json.loads(Path(args.camera).read_text(encoding="utf-8"))
            cam = CameraModel.from_dict(doc.get("camera", doc))
        else:
            intr = meta.get("intrinsics")
            if intr is None:
                raise CliError("joint checkpoint carries no intrinsics; pass --camera")
            cam = CameraModel(**intr)
        cam = cam.resized(full.shape[1], full.shape[0])
        img, skipped = render_joint_overlay(cam, full, result.joints)
        Image.fromarray(img).save(args.overlay)
        if skipped:
            print(f"warning: {skipped} point(s) behind the camera were not drawn", file=sys.stderr)
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _add_common(p, out_required=True):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=("desk", "full"), default="desk")
    if out_required:
        p.add_argument("--out", required=True)
        p.add_argument("--force", action="store_true", help="replace an existing output directory")


def _add_training(p):
    p.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-start", type=float)
    p.add_argument("--lr-end", type=float)
    p.add_argument("--limit", type=int, help="train on the first N training samples only")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--dry-run", action="store_true", help="print the resolved configuration and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robocascade", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic dataset")
    _add_common(p)
    p.add_argument("--robot", default="ur5like", help="preset name or chain JSON path")
    p.add_argument("--recordings", type=int, default=3)
    p.add_argument("--samples", type=int, help="total samples, split evenly across recordings")
    p.add_argument("--counts", help="comma-separated sample count per recording")
    p.add_argument("--steps", help="comma-separated sweep step (radians) per recording")
    p.add_argument("--resolution", help="WIDTHxHEIGHT of the rendered images")
    p.add_argument("--backgrounds", help="directory of background images (default: procedural noise)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-seg", help="train the mask network")
    _add_common(p)
    _add_training(p)
    p.add_argument("--robot", help="accepted for symmetry; the dataset fixes the robot")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-joints", help="train the joint regression network")
    _add_common(p)
    _add_training(p)
    p.add_argument("--robot", help="accepted for symmetry; the dataset fixes the robot")
    p.add_argument("--points", choices=("all", "joints"), default="all",
                   help="regress joint origins plus end-effector (all) or joint origins only")
    p.set_defaults(func=cmd_train_joints)

    p = sub.add_parser("eval", help="evaluate checkpoints on the test split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--seg")
    p.add_argument("--joints")
    p.add_argument("--only", choices=("mask", "separate", "full"))
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--robot", help="accepted for symmetry; reports cover every robot in the split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run the cascade on one image")
    p.add_argument("image")
    p.add_argument("--seg", required=True)
    p.add_argument("--joints", required=True)
    p.add_argument("--overlay", help="write an annotated PNG here")
    p.add_argument("--camera", help="label or camera JSON supplying intrinsics for --overlay")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=("desk", "full"), default="desk")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CliError, ValueError, KeyError, FileNotFoundError, SampleRejected, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
