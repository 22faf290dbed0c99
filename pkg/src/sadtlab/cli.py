"""Command-line interface: train, compare, probe, make-data."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def _add_train(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("train", help="run one experiment from a config file")
    p.add_argument("--config", required=True, help="path to an INI experiment config")
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")
    p.add_argument("--out", default=None, help="override [output] dir")
    p.add_argument(
        "--resolve-config", action="store_true",
        help="print the fully resolved config and exit",
    )


def _add_compare(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("compare", help="tabulate and chart completed runs")
    p.add_argument("--logs", nargs="+", required=True, help="run output directories")
    p.add_argument("--out", required=True, help="directory for the comparison report")


def _add_probe(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("probe", help="sharpness/divergence of a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--data", required=True,
        help="IDX pair 'images:labels', a directory of IDX files, or a CIFAR .bin file",
    )
    p.add_argument("--rho", type=float, default=0.05)
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument(
        "--against", default=None,
        help="optional second checkpoint; reports divergence between the two",
    )


def _add_make_data(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("make-data", help="write synthetic IDX train/test files")
    p.add_argument("--out", required=True)
    p.add_argument("--train-n", type=int, default=4096)
    p.add_argument("--test-n", type=int, default=1000)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.35)


def _resolve_probe_data(spec: str):
    from .data import load_cifar_binary, load_idx

    if spec.endswith(".bin"):
        return load_cifar_binary([spec])
    if ":" in spec:
        images, labels = spec.split(":", 1)
        return load_idx(images, labels)
    root = Path(spec)
    for stem in ("t10k", "test", "train"):
        imgs = root / f"{stem}-images-idx3-ubyte"
        lbls = root / f"{stem}-labels-idx1-ubyte"
        if imgs.exists() and lbls.exists():
            return load_idx(imgs, lbls)
    raise SystemExit(f"no IDX pair found under {spec}")


def _cmd_train(args) -> int:
    from .config import parse_config, resolved_text
    from .harness import run_experiment

    cfg = parse_config(args.config, seed=args.seed, out_dir=args.out)
    if args.resolve_config:
        print(resolved_text(cfg), end="")
        return 0
    log = run_experiment(cfg)
    print(f"run complete: {cfg.strategy_id} seed={cfg.seed}")
    print(f"final test accuracy {log.final_accuracy:.4f}, loss {log.final_loss:.4f}")
    print(f"outputs in {cfg.out_dir}")
    return 0


def _cmd_compare(args) -> int:
    from .report import compare_runs

    report = compare_runs(args.logs, args.out)
    print(report.table_text)
    print(f"report written to {report.out_dir}")
    return 0


def _cmd_probe(args) -> int:
    from .metrics import estimate_sharpness, model_divergence
    from .nn import load_checkpoint, model_from_params

    dataset = _resolve_probe_data(args.data)
    shape = dataset.images.shape[1:]
    model = model_from_params(load_checkpoint(args.checkpoint), input_shape=shape)
    count = min(args.batches * args.batch_size, dataset.n)
    batches = [
        (dataset.images[i : i + args.batch_size], dataset.labels[i : i + args.batch_size])
        for i in range(0, count, args.batch_size)
    ]
    sharp = estimate_sharpness(model, batches, args.rho)
    result = {
        "sharpness": sharp.value,
        "rho": sharp.rho,
        "batches": sharp.batches,
        "zero_grad_batches": sharp.zero_grad_batches,
    }
    if args.against:
        other = model_from_params(load_checkpoint(args.against), input_shape=shape)
        div = model_divergence(model, other, [img for img, _ in batches])
        result["divergence"] = div.value
        result["divergence_samples"] = div.samples
    print(json.dumps(result, indent=2))
    return 0


def _cmd_make_data(args) -> int:
    from .synth import generate_dataset_files

    paths = generate_dataset_files(
        args.out, args.train_n, args.test_n, args.classes, seed=args.seed, noise=args.noise
    )
    for key, path in paths.items():
        print(f"{key}: {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="sadtlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)
    _add_compare(sub)
    _add_probe(sub)
    _add_make_data(sub)
    args = parser.parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "compare": _cmd_compare,
        "probe": _cmd_probe,
        "make-data": _cmd_make_data,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
