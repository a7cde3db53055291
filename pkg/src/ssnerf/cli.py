"""``ssnerf`` command line: dataset generation, training, rendering, evaluation, transfer and ablations.

Exit codes: 0 success, 1 runtime failure (missing files, diverged training),
2 usage error (bad flags, unknown config keys).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .properties import Branch, ConfigError, Kind

log = logging.getLogger("ssnerf")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def _config_listing() -> str:
    from .trainer import CONFIG_HELP, TrainConfig

    defaults = TrainConfig()
    rows = [(f.name, json.dumps(getattr(defaults, f.name)), CONFIG_HELP.get(f.name, "")) for f in fields(TrainConfig)]
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    lines = ["training config keys (config JSON or --override key=value), with defaults:"]
    lines += [f"  {n.ljust(w0)}  {d.ljust(w1)}  {h}" for n, d, h in rows]
    return "\n".join(lines)


def _train_args(p: argparse.ArgumentParser, data_required: bool = True) -> None:
    p.add_argument("--data", required=data_required, help="dataset directory written by gen-scene")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set one config key (repeatable); values parse as JSON")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--workers", type=int, help="threads for training and rendering")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    listing = _config_listing()
    parser = argparse.ArgumentParser(prog="ssnerf", description="Multi-property radiance fields on analytic scenes.",
                                     epilog=listing + "\n\nlogging: set SSNF_LOG to quiet, info or debug",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    g = sub.add_parser("gen-scene", help="render an analytic scene into a dataset", formatter_class=fmt)
    g.add_argument("--scene", default="toy", help="builtin scene: two_spheres, toy, toy_specular")
    g.add_argument("--config", help="scene JSON (primitives, light_direction, class_names) or {\"builtin\": name}")
    g.add_argument("--views", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--steps", type=int, default=2048, help="reference quadrature steps per ray")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model", epilog=listing, formatter_class=fmt)
    _train_args(t)

    x = sub.add_parser("transfer", help="train with the trunk initialized from another checkpoint",
                       epilog=listing, formatter_class=fmt)
    _train_args(x)
    x.add_argument("--source", required=True, help="checkpoint whose trunk initializes the new model")

    a = sub.add_parser("ablate", help="train and evaluate an ablated model", epilog=listing, formatter_class=fmt)
    _train_args(a)
    a.add_argument("--property", required=True, choices=[k.value for k in Kind if k is not Kind.RGB])
    a.add_argument("--no-rgb", action="store_true", help="drop colour supervision (RGB loss weight 0)")
    a.add_argument("--branch", choices=[b.value for b in Branch], help="decoder branch for --property")
    a.add_argument("--reference", help="checkpoint to compare against in the report table")

    r = sub.add_parser("render", help="render property images for camera poses", formatter_class=fmt)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--poses", required=True, help="pose file")
    r.add_argument("--data", help="dataset whose near/far bounds to use")
    r.add_argument("--near", type=float)
    r.add_argument("--far", type=float)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score a checkpoint on held-out views", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["test", "train"], default="test")
    e.add_argument("--baseline", action="store_true", help="add the nearest-view reprojection baseline")
    e.add_argument("--no-figures", action="store_true")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", required=True)
    return parser


def _require(path, what="file") -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _resolve_config(args):
    from .trainer import TrainConfig

    config = TrainConfig.load(_require(args.config, "config")) if args.config else TrainConfig()
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    return config.with_overrides(overrides)


def _run_training(args, config, transfer_from=None):
    from .dataset import load_dataset
    from .plotting import loss_curves
    from .trainer import read_loss_log, train

    dataset = load_dataset(_require(args.data, "dataset"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    model = train(config, dataset, out, transfer_from=transfer_from)
    records = read_loss_log(out / "loss_log.jsonl")
    if records:
        loss_curves(records, out / "loss_curves.png")
    print(f"trained {model.step} steps; checkpoint {out / f'ckpt_{model.step:06d}.ssnf'}")
    return model, dataset


def cmd_gen_scene(args):
    from .scene import AnalyticScene, builtin_scene, gen_dataset

    if args.config:
        doc = json.loads(_require(args.config, "scene config").read_text())
        scene = builtin_scene(doc["builtin"]) if "builtin" in doc else AnalyticScene.from_dict(doc)
    else:
        try:
            scene = builtin_scene(args.scene)
        except KeyError as e:
            raise UsageError(str(e)) from None
    if args.views < 2:
        raise UsageError("--views must be at least 2")
    out = gen_dataset(scene, args.views, args.seed, args.out, args.width, args.height, steps=args.steps)
    print(f"wrote {args.views} views to {out}")


def cmd_train(args):
    _run_training(args, _resolve_config(args))


def cmd_transfer(args):
    _require(args.source, "source checkpoint")
    _run_training(args, _resolve_config(args), transfer_from=args.source)


def cmd_ablate(args):
    from .evalsuite import evaluate, evaluate_model, write_report

    config = _resolve_config(args)
    kind = args.property
    extra = [f"properties=\"{kind}\""]
    if args.no_rgb:
        extra.append("lambda_rgb=0")
    if args.branch:
        extra.append(f"branch_{kind}=\"{args.branch}\"")
    config = config.with_overrides(extra)
    model, dataset = _run_training(args, config)
    label = "ablated" + (" no-rgb" if args.no_rgb else "") + (f" {args.branch}" if args.branch else "")
    report = evaluate_model(model, dataset, dataset.test_views, workers=config.workers, label=label)
    others = []
    if args.reference:
        ref, _ = evaluate(_require(args.reference, "reference checkpoint"), dataset, "test", config.workers)
        ref.label = "reference"
        others.append(ref)
    write_report(report, Path(args.out) / "eval", others, figures=False)
    sys.stdout.write(report.table(others))


def cmd_render(args):
    from .geometry import read_poses
    from .imaging import write_f32, write_property
    from .renderer import render_image
    from .trainer import model_from_checkpoint

    model = model_from_checkpoint(_require(args.checkpoint, "checkpoint"))
    poses = read_poses(_require(args.poses, "pose file"))
    if args.data:
        manifest = json.loads(_require(Path(args.data) / "manifest.json", "manifest").read_text())
        near, far = manifest["near"], manifest["far"]
    elif args.near is not None and args.far is not None:
        near, far = args.near, args.far
    else:
        raise UsageError("give --data or both --near and --far")
    out = Path(args.out)
    for i, pose in enumerate(poses):
        res = render_image(model.coarse, model.fine, pose, model.specs, model.sampling(near, far), args.workers)
        vdir = out / f"view_{i:04d}"
        vdir.mkdir(parents=True, exist_ok=True)
        for kind, img in res.fine.items():
            write_property(vdir, kind, img.data, model.class_names or None)
        write_f32(vdir / "depth.f32", res.depth)
    print(f"rendered {len(poses)} views to {out}")


def cmd_eval(args):
    from .dataset import load_dataset
    from .evalsuite import baseline_report, evaluate, write_report

    dataset = load_dataset(_require(args.data, "dataset"))
    report, preds = evaluate(_require(args.checkpoint, "checkpoint"), dataset, args.split, args.workers)
    others = []
    if args.baseline:
        views = dataset.test_views if args.split == "test" else dataset.train_views
        base, _ = baseline_report(dataset, views, list(report.per_property))
        others.append(base)
    write_report(report, args.out, others, preds, dataset, figures=not args.no_figures)
    sys.stdout.write(report.table(others))


COMMANDS = {"gen-scene": cmd_gen_scene, "train": cmd_train, "transfer": cmd_transfer, "ablate": cmd_ablate,
            "render": cmd_render, "eval": cmd_eval}


def main(argv=None) -> int:
    level = os.environ.get("SSNF_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        COMMANDS[args.verb](args)
    except (UsageError, ConfigError) as e:
        print(f"ssnerf {args.verb}: usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # every other failure is a runtime error
        log.debug("traceback", exc_info=True)
        print(f"ssnerf {args.verb}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
