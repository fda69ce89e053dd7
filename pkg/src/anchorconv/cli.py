"""Command-line entry point: audit, train, eval, visualize.

Exit codes are a stable contract: 0 success, 1 tolerance/assertion failure,
2 usage or input error.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import data as data_io
from .arch import NetworkSpec, build_network, count_params, parse_spec_file
from .errors import AnchorConvError
from .training import (
    TrainConfig,
    channel_stats_normalize,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .viz import VizConfig, activation_maximize, write_ppm

SYNTH_TRAIN_N = 2048
SYNTH_TEST_N = 512


def _load_splits(spec: NetworkSpec, data_arg: str, seed: int):
    """Resolve --data into normalized (train, test) splits."""
    if data_arg == "synthetic":
        c, h, w = spec.input_shape
        if h != w:
            raise AnchorConvError("synthetic data needs a square input size")
        train_set = data_io.synthetic(seed, SYNTH_TRAIN_N, spec.num_classes, h)
        test_set = data_io.synthetic(seed + 1, SYNTH_TEST_N, spec.num_classes, h)
    else:
        if not os.path.isdir(data_arg):
            raise AnchorConvError(f"data directory not found: {data_arg}")
        train_set, test_set = data_io.load_cifar_dir(data_arg)
        if train_set.class_count != spec.num_classes:
            raise AnchorConvError(
                f"dataset has {train_set.class_count} classes, spec expects {spec.num_classes}"
            )
        if train_set.images.shape[1:] != spec.input_shape:
            raise AnchorConvError(
                f"dataset images {list(train_set.images.shape[1:])} do not match "
                f"spec input {list(spec.input_shape)}"
            )
    return channel_stats_normalize(train_set, test_set)


def cmd_audit(args) -> int:
    spec = parse_spec_file(args.spec)
    report = count_params(build_network(spec))
    print(report.format_table())
    if args.expected is not None:
        total_m = report.total / 1e6
        tol = args.tol if args.tol is not None else max(0.05 * args.expected, 0.012)
        delta = abs(total_m - args.expected)
        status = "ok" if delta <= tol else "MISMATCH"
        print(f"expected {args.expected} M, got {total_m:.4f} M, |delta| {delta:.4f} <= {tol:.4f}: {status}")
        if delta > tol:
            return 1
    return 0


def cmd_train(args) -> int:
    spec = parse_spec_file(args.spec)
    train_set, test_set = _load_splits(spec, args.data, args.seed)
    net = build_network(spec, init_seed=args.seed)
    config = TrainConfig.cifar_default(
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch,
        augment_flip=args.augment,
        seed=args.seed,
    )
    metrics = train(net, train_set, config, test_set)
    os.makedirs(args.out, exist_ok=True)
    metrics.write_csv(os.path.join(args.out, "metrics.csv"))
    save_checkpoint(net.params, os.path.join(args.out, "checkpoint.bin"))
    last = metrics.records[-1]
    print(
        f"trained {config.epochs} epochs: train_top1={last.train_top1} test_top1={last.test_top1}"
    )
    return 0


def cmd_eval(args) -> int:
    spec = parse_spec_file(args.spec)
    train_set, test_set = _load_splits(spec, args.data, args.seed)
    net = build_network(spec)
    load_checkpoint(net.params, args.checkpoint)
    err = evaluate(net, train_set if args.split == "train" else test_set)
    print(f"top1_err={err!r}")
    return 0


def cmd_visualize(args) -> int:
    spec = parse_spec_file(args.spec)
    net = build_network(spec, init_seed=args.seed)
    if args.checkpoint is not None:
        load_checkpoint(net.params, args.checkpoint)
    cfg = VizConfig(
        layer_index=args.layer,
        filter_index=args.filter,
        steps=args.steps,
        step_size=args.step_size,
        seed=args.seed,
        output_size=(spec.input_shape[1], spec.input_shape[2]),
    )
    image = activation_maximize(net, cfg)
    write_ppm(image, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorconv",
        description="Weight-shared CNN experiments: parameter audits, training, "
        "evaluation, and filter visualization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_audit = sub.add_parser("audit", help="print a parameter-count report for a spec")
    p_audit.add_argument("--spec", required=True, help="network spec file")
    p_audit.add_argument("--expected", type=float, help="expected total in millions")
    p_audit.add_argument("--tol", type=float, help="tolerance in millions (default max(5%%, 0.012))")
    p_audit.set_defaults(func=cmd_audit)

    p_train = sub.add_parser("train", help="train a network and write metrics + checkpoint")
    p_train.add_argument("--spec", required=True)
    p_train.add_argument("--data", required=True, help="CIFAR binary directory, or 'synthetic'")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--epochs", type=int, default=90)
    p_train.add_argument("--batch", type=int, default=128)
    p_train.add_argument("--lr", type=float, default=0.1)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--augment", action="store_true", help="random horizontal flip")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="TOP-1 error of a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--spec", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", choices=("train", "test"), default="test")
    p_eval.add_argument("--seed", type=int, default=0, help="seed used for synthetic data")
    p_eval.set_defaults(func=cmd_eval)

    p_viz = sub.add_parser("visualize", help="activation-maximization image for one filter")
    p_viz.add_argument("--checkpoint", help="optional; defaults to a fresh seeded init")
    p_viz.add_argument("--spec", required=True)
    p_viz.add_argument("--layer", type=int, required=True, help="conv ordinal, 0-based")
    p_viz.add_argument("--filter", type=int, required=True)
    p_viz.add_argument("--steps", type=int, default=100)
    p_viz.add_argument("--step-size", type=float, default=0.1, dest="step_size")
    p_viz.add_argument("--seed", type=int, default=0)
    p_viz.add_argument("--out", required=True, help="output PPM path")
    p_viz.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (AnchorConvError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
