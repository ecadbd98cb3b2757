"""``usbone`` command line.

Exit codes: 0 success, 1 argument/usage error, 2 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import phantom as phantom_mod
from .bonemap import build_scale_stack
from .config import ConfigError, RunConfig
from .evaluation import eval_hit_rate, render_overlay
from .tga import apply_tga
from .transporter.checkpoint import CheckpointError, load_checkpoint
from .transporter.networks import Transporter
from .transporter.training import CHECKPOINT_NAME, infer_keypoint_sets, train
from .usgrid import (
    FRAME_PATTERN,
    FrameFormatError,
    RectROI,
    load_frame,
    load_sequence,
    save_frame,
    save_sequence,
    write_usf,
)

log = logging.getLogger("usbone")

RUN_CONFIG_NAME = "run_config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _scales(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid scale list {text!r}")


# flag dest -> (section, field)
OVERRIDES = {
    "a": ("tga", "attenuation_a"),
    "scales": ("bonemap", "scales"),
    "tau": ("bonemap", "fs_tau"),
    "keypoints": ("network", "keypoints"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "learning_rate"),
    "batch_size": ("train", "batch_size"),
    "train_pairs": ("train", "train_pairs"),
    "val_pairs": ("train", "val_pairs"),
    "separation": ("train", "pair_separation"),
    "size": ("phantom", "size"),
    "frames": ("phantom", "frames"),
}


def _add_common(p: argparse.ArgumentParser, *flags: str) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="seed for every random choice")
    specs = {
        "a": dict(type=float, help="TGA attenuation factor per pixel row"),
        "scales": dict(type=_scales, help="comma-separated wavelengths in pixels"),
        "tau": dict(type=float, help="feature-symmetry threshold"),
        "keypoints": dict(type=int),
        "epochs": dict(type=int),
        "lr": dict(type=float),
        "batch_size": dict(type=int),
        "train_pairs": dict(type=int),
        "val_pairs": dict(type=int),
        "separation": dict(type=int),
        "size": dict(type=int),
        "frames": dict(type=int),
    }
    for flag in flags:
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, **specs[flag])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="usbone", description="Ultrasound bone keypoint toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("phantom", help="generate a synthetic sweep with ground truth")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--margin", type=int, default=10)
    _add_common(p, "size", "frames")

    p = sub.add_parser("tga", help="apply TGA compensation to frames")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p, "a")

    p = sub.add_parser("bonemap", help="write bone probability maps per scale")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threads", type=int, default=1)
    _add_common(p, "a", "scales", "tau")

    p = sub.add_parser("train", help="train the transporter on PNG sequences")
    p.add_argument("--data", type=Path, action="append", required=True, help="sequence directory (repeatable)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resize", type=int, help="resize frames to this square side")
    p.add_argument("--threads", type=int, default=1)
    _add_common(p, "a", "scales", "tau", "keypoints", "epochs", "lr", "batch_size",
                "train_pairs", "val_pairs", "separation")

    p = sub.add_parser("infer", help="detect keypoints with a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resize", type=int)
    p.add_argument("--threads", type=int, default=1)
    _add_common(p, "a", "scales", "tau", "keypoints")

    p = sub.add_parser("eval", help="keypoint-in-ROI hit rate")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True)
    p.add_argument("--top-n", type=int, default=1)
    p.add_argument("--margin", type=int, help="recompute ROIs from the truth curves")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("overlay", help="draw keypoints and ROIs on frames")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--truth", type=Path)
    p.add_argument("--margin", type=int)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _run_config(args, default_path: Path | None = None) -> RunConfig:
    path = getattr(args, "config", None)
    if path is None and default_path is not None and default_path.exists():
        path = default_path
    cfg = RunConfig.load(path) if path is not None else RunConfig()
    for dest, (section, name) in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "size":
            cfg = cfg.resize_phantom(value)
        else:
            cfg = cfg.override(section, **{name: value})
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = cfg.override("train", seed=seed).override("phantom", seed=seed)
    return cfg


def _frame_paths(path: Path) -> list[Path]:
    if path.is_dir():
        paths = sorted(path.glob("frame_*.png"))
        if not paths:
            raise FileNotFoundError(f"no frame_*.png files in {path}")
        return paths
    if not path.exists():
        raise FileNotFoundError(path)
    return [path]


def _load_keypoints(path: Path) -> dict[int, np.ndarray]:
    doc = json.loads(path.read_text())
    return {int(k): np.asarray(v, dtype=np.float64).reshape(-1, 2) for k, v in doc.items()}


def _load_truth(path: Path, margin: int | None):
    doc = json.loads(path.read_text())
    truth = phantom_mod.PhantomTruth.from_dict(doc)
    if margin is None:
        rois = [RectROI(*r) for r in doc["rois"]]
    else:
        rois = [phantom_mod.truth_roi(truth, i, margin) for i in range(len(truth.curves))]
    return truth, rois


def cmd_phantom(args) -> int:
    cfg = _run_config(args)
    seq, truth = phantom_mod.generate(cfg.phantom)
    save_sequence(seq, args.out)
    doc = truth.to_dict(args.margin)
    doc["config"] = cfg.phantom.to_dict()
    (args.out / "truth.json").write_text(json.dumps(doc) + "\n")
    log.info("wrote %d frames to %s", len(seq), args.out)
    return 0


def cmd_tga(args) -> int:
    cfg = _run_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    for path in _frame_paths(args.input):
        save_frame(apply_tga(load_frame(path, None), cfg.tga), args.out / path.name)
    return 0


def cmd_bonemap(args) -> int:
    cfg = _run_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    paths = _frame_paths(args.input)

    def one(path: Path):
        stack = build_scale_stack(apply_tga(load_frame(path, None), cfg.tga), cfg.bonemap)
        for scale, channel in zip(stack.scales, stack.channels[1:]):
            stem = f"{path.stem}_s{scale:g}"
            write_usf(channel, args.out / f"{stem}.usf")
            save_frame(channel / channel.max() if channel.max() > 0 else channel, args.out / f"{stem}.png")

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(args.threads) as pool:
            list(pool.map(one, paths))
    else:
        for path in paths:
            one(path)
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    size = (args.resize, args.resize) if args.resize else None
    data = [load_sequence(d, size) for d in args.data]
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / RUN_CONFIG_NAME).write_text(cfg.to_json())
    result = train(data, cfg.train, cfg.network_for_input(), cfg.bonemap, cfg.tga, out_dir=args.out,
                   threads=args.threads)
    last = result.metrics[-1]
    print(json.dumps({"epochs": len(result.metrics), "train_loss": last["train_loss"],
                      "val_loss": last["val_loss"], "checkpoint": str(args.out / CHECKPOINT_NAME)}))
    return 0


def cmd_infer(args) -> int:
    cfg = _run_config(args, args.checkpoint.parent / RUN_CONFIG_NAME)
    model = load_checkpoint(args.checkpoint, Transporter(cfg.network_for_input()))
    size = (args.resize, args.resize) if args.resize else None
    paths = _frame_paths(args.input)
    frames = np.stack([load_frame(p, size) for p in paths])
    kps = infer_keypoint_sets(frames, model, cfg.bonemap, cfg.tga, threads=args.threads)
    doc = {str(i): np.round(k.to_pixels(), 4).tolist() for i, k in enumerate(kps)}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(doc) + "\n")
    return 0


def cmd_eval(args) -> int:
    pred = _load_keypoints(args.pred)
    truth, rois = _load_truth(args.truth, args.margin)
    ids = sorted(pred)
    missing = [i for i in ids if not 0 <= i < len(rois)]
    if missing:
        raise ValueError(f"predictions for frames {missing[:5]} have no ground truth")
    report = eval_hit_rate([pred[i] for i in ids], [rois[i] for i in ids], args.top_n, ids)
    text = json.dumps(report.to_dict())
    print(text)
    if args.out is not None:
        args.out.write_text(text + "\n")
    return 0


def cmd_overlay(args) -> int:
    pred = _load_keypoints(args.pred)
    rois = _load_truth(args.truth, args.margin)[1] if args.truth else None
    paths = _frame_paths(args.input)
    args.out.mkdir(parents=True, exist_ok=True)
    for i in sorted(pred):
        if i >= len(paths):
            raise ValueError(f"keypoints for frame {i} but only {len(paths)} frames")
        roi = rois[i] if rois is not None else None
        render_overlay(load_frame(paths[i], None), pred[i], roi, args.out / FRAME_PATTERN.format(i))
    return 0


COMMANDS = {
    "phantom": cmd_phantom,
    "tga": cmd_tga,
    "bonemap": cmd_bonemap,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "overlay": cmd_overlay,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, FrameFormatError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"usbone {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, IndexError, KeyError) as exc:
        print(f"usbone {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
