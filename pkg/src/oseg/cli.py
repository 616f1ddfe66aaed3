"""Command-line entry point: ``oseg <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Diagnostics go to
stderr; JSON results go to stdout, or to ``--out`` for subcommands whose
result is a report. Every run with an output path also writes
``<out>.config.json`` echoing the exact flags.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__

log = logging.getLogger("oseg")

THREADS_ENV = "OSEG_THREADS"


class UsageError(Exception):
    """Bad flag combination detected after parsing; exits with code 2."""


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(result: dict, out: str | None) -> None:
    text = dumps(result)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _config_echo(args: argparse.Namespace, argv: Sequence[str]) -> dict:
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return {"version": __version__, "subcommand": args.command, "argv": list(argv), "flags": flags}


def _echo_path(args: argparse.Namespace) -> Path | None:
    if getattr(args, "out_dir", None):
        return Path(args.out_dir) / "config.json"
    if getattr(args, "out", None):
        return Path(args.out + ".config.json")
    return None


def _png_dir(path: str) -> list[Path]:
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG images in {path}")
    return files


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate_sensor(args) -> None:
    from .data import load_image, save_image
    from .sensors import apply_sensor

    _require(args, "out")
    save_image(args.out, apply_sensor(load_image(args.input), args.model))


def cmd_generate_synthetic(args) -> None:
    from .synthetic import generate_dataset

    manifest = generate_dataset(args.out_dir, args.seed, args.count, args.size, args.test_count)
    log.info("wrote %d items to %s", len(manifest.items), args.out_dir)


def cmd_train_seg(args) -> None:
    from .data import load_manifest
    from .refine import RefineConfig
    from .segmenter import save_segmenter, train_segmenter

    _require(args, "out")
    manifest = load_manifest(args.manifest)
    config = RefineConfig(levels=args.levels, filters=args.filters, upsample_mode=args.upsample_mode,
                          num_classes=manifest.num_classes, fuse_skips=args.fuse_skips,
                          steps=args.steps, batch_size=args.batch_size, lr=args.lr)
    records = []

    def on_step(step, loss):
        records.append({"step": step, "loss": loss})
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, loss)

    net, _ = train_segmenter(manifest, config, args.seed, on_step=on_step)
    save_segmenter(args.out, net)
    if args.loss_log:
        Path(args.loss_log).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def cmd_infer(args) -> None:
    from .data import load_image, save_mask
    from .segmenter import load_segmenter, segment_large

    _require(args, "out")
    net = load_segmenter(args.weights)
    save_mask(args.out, segment_large(load_image(args.input), net, args.chip_size, args.overlap))


def _load_chips(directory: str, chip: int) -> list[np.ndarray]:
    from .data import load_image, tile_image

    return [c.pixels for p in _png_dir(directory) for c in tile_image(load_image(p), chip)]


def cmd_train_adapt(args) -> None:
    from .adapt import (GanLossWeights, TranslatorConfig, save_translator, train_translator,
                        write_loss_log)

    _require(args, "out")
    source = _load_chips(args.source_dir, args.chip_size)
    target = _load_chips(args.target_dir, args.chip_size)
    weights = GanLossWeights(args.alpha, args.lam, args.beta)
    config = TranslatorConfig(args.base_filters, args.identity_init)
    params, history = train_translator(
        source, target, weights, args.epochs, args.seed, config, lr=args.lr,
        adversarial=args.adversarial,
        on_epoch=lambda r: log.info("epoch %d %s", r.epoch, r.to_json()))
    save_translator(args.out, params)
    write_loss_log(args.loss_log or args.out + ".loss.jsonl", history)


def cmd_translate(args) -> None:
    from .adapt import load_translator, translate
    from .data import load_image, save_image

    _require(args, "out")
    save_image(args.out, translate(load_image(args.input), load_translator(args.weights), args.direction))


def cmd_evaluate(args) -> None:
    from .data import load_mask
    from .metrics import accumulate_confusion, evaluation_report

    pred, truth = load_mask(args.pred), load_mask(args.truth, args.classes)
    cm = accumulate_confusion(pred, truth, args.classes)
    _emit(evaluation_report(cm), args.out)


def cmd_count_buildings(args) -> None:
    from .data import load_mask
    from .metrics import building_count_report

    report = building_count_report(load_mask(args.pred), load_mask(args.truth), args.connectivity,
                                   args.min_area, args.building_class)
    _emit(report, args.out)


def cmd_overlay(args) -> None:
    from .data import DEFAULT_PALETTE, load_image, load_manifest, load_mask, save_image
    from .viz import render_overlay

    _require(args, "out")
    palette = (load_manifest(args.manifest, check_masks=False).palette if args.manifest
               else [c for _, _, c in DEFAULT_PALETTE])
    save_image(args.out, render_overlay(load_image(args.image), load_mask(args.mask), palette, args.opacity))


def cmd_sa_experiment(args) -> None:
    from .data import load_manifest
    from .experiment import SAExperimentConfig, manifest_data, run_sa_experiment

    config = SAExperimentConfig(
        seed=args.seed, sensors=tuple(args.sensors), mode=args.mode, binary=not args.all_classes,
        train_scenes=args.train_scenes, target_scenes=args.target_scenes, test_scenes=args.test_scenes,
        scene_size=args.scene_size, seg_filters=args.seg_filters, seg_steps=args.seg_steps,
        translator_filters=args.translator_filters, translator_epochs=args.translator_epochs,
        translator_lr=args.translator_lr, adversarial=args.adversarial,
        identity_init=args.identity_init, beta=args.beta)
    data = manifest_data(load_manifest(args.manifest)) if args.manifest else None
    _emit(run_sa_experiment(config, data), args.out)


def _require(args, name: str) -> None:
    if not getattr(args, name, None):
        raise UsageError(f"{args.command} needs --{name.replace('_', '-')}")


# ---------------------------------------------------------------------------
# parser


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0,
                        help="random seed (default 0)")
    parser.add_argument("--threads", type=int, default=default,
                        help=f"BLAS threads (falls back to ${THREADS_ENV})")
    parser.add_argument("--out", default=default, help="output file")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    from .adapt import ADVERSARIAL_FORMS, Direction
    from .refine import UpsampleMode
    from .sensors import SensorModel

    parser = argparse.ArgumentParser(prog="oseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>")
    sensors = [m.value for m in SensorModel]

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("simulate-sensor", cmd_simulate_sensor, "apply a simulated sensor to an RGB PNG")
    p.add_argument("--model", required=True, choices=sensors)
    p.add_argument("--in", dest="input", required=True)

    p = add("generate-synthetic", cmd_generate_synthetic, "write a synthetic scene dataset and manifest")
    p.add_argument("--count", type=int, required=True, help="training scenes")
    p.add_argument("--test-count", type=int, default=0, help="test scenes")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out-dir", required=True)

    p = add("train-seg", cmd_train_seg, "train the refinement segmenter from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--filters", type=int, default=16)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--upsample-mode", default=UpsampleMode.DIRECT_COPY.value,
                   choices=[m.value for m in UpsampleMode])
    p.add_argument("--fuse-skips", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--loss-log", help="JSON-lines file of per-step losses")

    p = add("infer", cmd_infer, "segment an image of any size by chipping and stitching")
    p.add_argument("--weights", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--chip-size", type=int, default=64)
    p.add_argument("--overlap", type=int, default=0)

    p = add("train-adapt", cmd_train_adapt, "train the sensor translator on unpaired image folders")
    p.add_argument("--source-dir", required=True)
    p.add_argument("--target-dir", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--base-filters", type=int, default=64)
    p.add_argument("--chip-size", type=int, default=32)
    p.add_argument("--adversarial", default="saturating", choices=sorted(ADVERSARIAL_FORMS))
    p.add_argument("--identity-init", action="store_true")
    p.add_argument("--loss-log", help="JSON-lines loss log (default <out>.loss.jsonl)")

    p = add("translate", cmd_translate, "apply a trained translator to an image")
    p.add_argument("--weights", required=True)
    p.add_argument("--direction", default=Direction.SOURCE_TO_TARGET.value,
                   choices=[d.value for d in Direction])
    p.add_argument("--in", dest="input", required=True)

    p = add("evaluate", cmd_evaluate, "IoU / F1 report for a predicted mask")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--classes", type=int, required=True)

    p = add("count-buildings", cmd_count_buildings, "compare building component counts")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--connectivity", type=int, default=8, choices=(4, 8))
    p.add_argument("--min-area", type=int, default=0)
    p.add_argument("--building-class", type=int, default=1)

    p = add("overlay", cmd_overlay, "blend class colours over an image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--opacity", type=float, default=0.5)
    p.add_argument("--manifest", help="take the palette from this manifest")

    p = add("sa-experiment", cmd_sa_experiment, "compare segmentation with and without sensor adaptation")
    p.add_argument("--sensors", nargs="+", default=sensors, choices=sensors)
    p.add_argument("--mode", default="forward", choices=("forward", "backward"))
    p.add_argument("--manifest", help="use a dataset manifest instead of synthetic scenes")
    p.add_argument("--all-classes", action="store_true", help="score every class, not building vs rest")
    p.add_argument("--train-scenes", type=int, default=16)
    p.add_argument("--target-scenes", type=int, default=16)
    p.add_argument("--test-scenes", type=int, default=8)
    p.add_argument("--scene-size", type=int, default=64)
    p.add_argument("--seg-filters", type=int, default=16)
    p.add_argument("--seg-steps", type=int, default=300)
    p.add_argument("--translator-filters", type=int, default=16)
    p.add_argument("--translator-epochs", type=int, default=10)
    p.add_argument("--translator-lr", type=float, default=2e-4)
    p.add_argument("--adversarial", default="saturating", choices=sorted(ADVERSARIAL_FORMS))
    p.add_argument("--identity-init", action="store_true")
    p.add_argument("--beta", type=float, default=0.9)
    return parser


def _thread_limit(threads: int | None):
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if threads is None:
        return contextlib.nullcontext()
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        print("oseg: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args.threads):
            args.func(args)
        echo = _echo_path(args)
        if echo is not None:
            echo.write_text(dumps(_config_echo(args, argv)))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"oseg: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError, KeyError) as exc:
        print(f"oseg: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
