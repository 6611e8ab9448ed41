"""Command-line front end: gen-data, train, eval, infer, gradcheck,
param-count.

Exit codes: 0 success, 1 validation error (bad arguments, config, or input
files), 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import engine as eg
from .config import ValidationError, parse_run_config
from .data import FormatError, ManifestError, gen_phantoms, load_split, read_tensor
from .engine import EngineError, Tensor
from .model import (
    CheckpointError,
    InvalidConfig,
    build_model,
    count_params,
    load_checkpoint,
)
from .training import EmptyDataset, TrainParams, evaluate, train_loop

# Fixed 9-color palette for exported label masks (class index -> RGB).
PALETTE = (
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def write_ppm(path, labels: np.ndarray):
    """Binary P6 image of a [h, w] label map using the fixed palette."""
    h, w = labels.shape
    lut = np.array(PALETTE, np.uint8)
    rgb = lut[np.asarray(labels, np.int64) % len(PALETTE)]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def _build_parser() -> _Parser:
    p = _Parser(prog="acm-unet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--classes", type=int, required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train per a run config")
    t.add_argument("--config", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint per a run config")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])

    i = sub.add_parser("infer", help="run one image through a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)

    sub.add_parser("gradcheck", help="run the module gradient suites")

    c = sub.add_parser("param-count", help="print the parameter count")
    c.add_argument("--config", required=True)
    return p


def _cmd_gen_data(args) -> int:
    manifest = gen_phantoms(args.seed, args.count, args.size, args.classes,
                            args.out)
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    run = parse_run_config(args.config)
    if not run.manifest:
        raise ValidationError("config must set data.manifest")
    train_set = load_split(run.manifest, "train", run.model.num_classes)
    val_set = load_split(run.manifest, "val", run.model.num_classes)
    if not train_set:
        raise EmptyDataset("manifest has no train entries")
    model = build_model(run.model, seed=run.train.seed)
    history, best, csv_path = train_loop(model, train_set, val_set, run.train,
                                         out_dir=run.out_dir,
                                         spacing=run.spacing)
    last = history[-1]
    print(f"trained {len(history)} epochs; final loss {last['train_loss']:.6g}, "
          f"val DSC {last['val_dsc_mean']:.6g}")
    print(f"log: {csv_path}")
    print(f"best checkpoint: {best}")
    return 0


def _cmd_eval(args) -> int:
    run = parse_run_config(args.config)
    if not run.manifest:
        raise ValidationError("config must set data.manifest")
    model, _, _ = load_checkpoint(args.checkpoint)
    data = load_split(run.manifest, args.split, model.config.num_classes)
    if not data:
        raise EmptyDataset(f"manifest has no {args.split} entries")
    report = evaluate(model, data, spacing=run.spacing,
                      batch_size=run.train.batch_size)
    print(report)
    out = f"{run.out_dir.rstrip('/')}/metrics_{args.split}.csv"
    import os
    os.makedirs(run.out_dir, exist_ok=True)
    with open(out, "w") as f:
        f.write(report.to_csv())
    print(f"metrics: {out}")
    return 0


def _cmd_infer(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    image = read_tensor(args.image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValidationError(f"expected a [3, h, w] image, got {image.shape}")
    model.eval()
    logits = model(Tensor(image.data[None]))
    labels = np.argmax(logits.data[0], axis=0)
    write_ppm(args.out, labels)
    print(args.out)
    return 0


def _cmd_gradcheck(_args) -> int:
    from .verification import gradient_suite
    reports = gradient_suite()
    failed = 0
    for name, rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {name}: max rel err {rep.max_rel_err:.3e} "
              f"(tol {rep.tol:.1e})")
        failed += not rep.passed
    if failed:
        print(f"{failed}/{len(reports)} gradient checks failed")
        return 2
    print(f"all {len(reports)} gradient checks passed")
    return 0


def _cmd_param_count(args) -> int:
    run = parse_run_config(args.config)
    model = build_model(run.model, seed=run.train.seed)
    print(count_params(model))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "gradcheck": _cmd_gradcheck,
    "param-count": _cmd_param_count,
}

_VALIDATION_ERRORS = (
    ValidationError,
    InvalidConfig,
    FormatError,
    ManifestError,
    CheckpointError,
    EmptyDataset,
    OSError,
)


def cli(argv) -> int:
    """Run one CLI invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EngineError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - uniform runtime exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
