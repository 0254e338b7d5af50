"""Command-line driver: train, eval, ablate, export-features, make-synthetic.

Heavy imports happen after argument parsing so that --threads can cap the
BLAS thread pools through environment variables before numpy is loaded.
Determinism guarantees assume --threads 1.
"""

from __future__ import annotations

import argparse
import os
import sys


def _add_common(parser: argparse.ArgumentParser, need_config: bool = True) -> None:
    parser.add_argument("--config", required=need_config, help="run config file (key=value lines)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--precision", choices=["f32", "f64"], default=None,
                        help="override numeric precision")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (1 for deterministic runs)")
    parser.add_argument("--split-index", type=int, default=None,
                        help="override the leave-one-instance-out split index")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rcfusion",
        description="Train and evaluate the recurrent convolutional fusion model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="multi-start training run with metrics and checkpoint")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="tap-range x orthogonality ablation table")
    _add_common(p)

    p = sub.add_parser("export-features", help="dump RCFT feature matrices for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("make-synthetic", help="write a synthetic dataset in the on-disk layout")
    _add_common(p)
    return parser


def _apply_thread_cap(threads) -> None:
    if threads is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_thread_cap(args.threads)

    from . import harness
    from .data import export_dataset_layout, make_synthetic_dataset, SyntheticSpec

    config = harness.parse_run_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.precision is not None:
        overrides["precision"] = args.precision
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.split_index is not None:
        overrides["split_index"] = args.split_index
    if overrides:
        from dataclasses import fields

        config = harness.RunConfig(**{
            **{f.name: getattr(config, f.name) for f in fields(harness.RunConfig)},
            **overrides,
        })

    if args.command == "train":
        result = harness.train(config)
        if result.final is not None:
            print(
                f"epoch {result.final.epoch}: loss {result.final.loss_total:.6f} "
                f"train_acc {result.final.train_accuracy:.4f} "
                f"test_acc {result.final.test_accuracy:.4f}"
            )
        print(f"metrics: {result.metrics_path}")
        print(f"checkpoint: {result.checkpoint_path}")
        return 0

    if args.command == "eval":
        out_dir = args.out if args.out is not None else config.out_dir
        overall, per_class = harness.evaluate(config, args.checkpoint, out_dir)
        for name, (correct, total, acc) in per_class.per_class.items():
            print(f"{name}: {correct}/{total} = {acc:.4f}")
        print(f"overall accuracy: {overall:.4f}")
        return 0

    if args.command == "ablate":
        rows = harness.run_ablation(config)
        columns = [c for c, _, _ in harness.ABLATION_COLUMNS]
        print("loss_variant," + ",".join(columns))
        for row, cells in rows.items():
            rendered = ["" if cells[c] is None else f"{cells[c]:.4f}" for c in columns]
            print(row + "," + ",".join(rendered))
        return 0

    if args.command == "export-features":
        out_dir = args.out if args.out is not None else config.out_dir
        paths = harness.export_features(config, args.checkpoint, out_dir)
        for kind, path in paths.items():
            print(f"{kind}: {path}")
        return 0

    if args.command == "make-synthetic":
        coupling = "xor" if config.dataset != "synthetic-redundant" else "redundant"
        spec = SyntheticSpec(
            num_classes=config.num_classes,
            samples_per_class=config.samples_per_class,
            image_size=config.image_size,
            seed=config.seed,
            coupling=coupling,
            noise_level=config.noise_level,
            instances_per_class=config.instances_per_class,
            missing_fraction=config.missing_fraction,
        )
        out_dir = args.out if args.out is not None else config.out_dir
        samples = make_synthetic_dataset(spec)
        export_dataset_layout(samples, out_dir)
        print(f"wrote {len(samples)} samples to {out_dir}")
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
