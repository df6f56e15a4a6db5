"""Command-line surface for the pipeline.

Every command prints its fully resolved configuration (defaults materialized)
as the first stdout line, prefixed ``# config:``; re-running the command with
exactly those arguments reproduces byte-identical output.  stdout carries
data, stderr carries logs.  Exit codes: 0 ok, 2 numeric degeneracy, 3 input
contract violation, 4 sampler stuck.
"""
from __future__ import annotations

import argparse
import shlex
import sys
from pathlib import Path

from . import data as data_mod
from . import formats, kdtree, model, pca
from .autodiff import ParamStore
from .ead import ead_exact, ead_mc
from .errors import (DegenerateCloud, DegenerateTriple, DimensionMismatch,
                     NearInfiniteProjection, NonFiniteLoss, NonFiniteValue,
                     NotPowerOfTwo, PointTreeError, RankDeficient, SamplerStuck,
                     ShapeMismatch, TooManyDegenerateTriples)
from .sampler import DISTRIBUTION_KINDS, TransformDistribution, transform_dataset

EXIT_OK = 0
EXIT_DEGENERATE = 2
EXIT_CONTRACT = 3
EXIT_SAMPLER = 4

_DEGENERACY = (DegenerateCloud, RankDeficient, DegenerateTriple,
               TooManyDegenerateTriples, NonFiniteValue, NonFiniteLoss,
               NearInfiniteProjection)
_CONTRACT = (NotPowerOfTwo, ShapeMismatch, DimensionMismatch, ValueError,
             OSError, KeyError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are input-contract violations
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONTRACT)


def sci(value: float) -> str:
    """Scientific notation with a bare exponent, e.g. 0.000000e0."""
    mantissa, exponent = f"{value:.6e}".split("e")
    return f"{mantissa}e{int(exponent)}"


def _print_config(command: str, tokens) -> None:
    line = " ".join([command] + [shlex.quote(str(t)) for t in tokens])
    print(f"# config: {line}")
    sys.stdout.flush()


def _emit_cloud(cloud, fmt: str, out: str | None) -> None:
    if out:
        formats.write_cloud(cloud, out, fmt)
    elif fmt == "ptc1":
        sys.stdout.buffer.write(formats.ptc1_bytes(cloud))
    else:
        sys.stdout.write(formats.format_xyz(cloud))


def _emit_text(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="ascii")
    else:
        sys.stdout.write(text)


def cmd_prealign(args) -> int:
    _print_config("prealign", [
        args.input, "--max-iter", args.max_iter, "--format", args.format,
        "--seed", args.seed] + (["--iterative"] if args.iterative else [])
        + (["--out", args.out] if args.out else []))
    cloud = formats.read_cloud(args.input, args.format)
    if args.iterative:
        result = pca.iterative_prealign(cloud, max_iter=args.max_iter)
        print(f"converged={result.converged} iterations={result.iterations}",
              file=sys.stderr)
        cloud = result.cloud
    else:
        cloud = pca.prealign(cloud)
    _emit_cloud(cloud, args.format, args.out)
    return EXIT_OK


def cmd_tree(args) -> int:
    _print_config("tree", [
        args.input, "--rule", args.rule, "--format", args.format,
        "--seed", args.seed] + (["--pad"] if args.pad else [])
        + (["--out", args.out] if args.out else []))
    cloud = formats.read_cloud(args.input, args.format)
    if args.pad:
        cloud = data_mod.pad_to_pow2(cloud, args.seed)
    rule = kdtree.AXIS_MEDIAN if args.rule == "axis" else kdtree.PCA_MEDIAN
    tree = kdtree.build(cloud, rule)
    _emit_text(kdtree.dump(tree), args.out)
    return EXIT_OK


def cmd_ead(args) -> int:
    mode = ["--exact"] if args.exact else ["--samples", args.samples]
    _print_config("ead", [args.a, args.b, "--format", args.format,
                          "--seed", args.seed] + mode)
    cloud_a = formats.read_cloud(args.a, args.format)
    cloud_b = formats.read_cloud(args.b, args.format)
    if args.exact:
        est = ead_exact(cloud_a, cloud_b)
    else:
        est = ead_mc(cloud_a, cloud_b, args.samples, args.seed)
    print(f"{sci(est.value)} {sci(est.stderr)}")
    return EXIT_OK


def cmd_transform(args) -> int:
    _print_config("transform", [
        args.input, "--dist", args.dist, "--augment", args.augment,
        "--candidates", args.candidates, "--seed", args.seed,
        "--out", args.out])
    kind = {"affine-agg": "affine_aggressive"}.get(args.dist, args.dist)
    dist = TransformDistribution(kind, candidates=args.candidates)
    records = formats.read_dataset_dir(args.input)
    out = transform_dataset(records, dist, args.augment, args.seed)
    formats.write_dataset_dir(out, args.out)
    print(f"wrote {len(out)} records to {args.out}")
    return EXIT_OK


def cmd_gen(args) -> int:
    _print_config("gen", [
        "--benchmark", args.benchmark, "--per-class", args.per_class,
        "--points", args.points, "--noise", args.noise, "--seed", args.seed,
        "--out", args.out])
    if args.benchmark == "classify":
        records = data_mod.make_classification_benchmark(
            per_class=args.per_class, n_points=args.points,
            noise=args.noise, seed=args.seed)
    else:
        records = data_mod.make_segmentation_benchmark(
            count=args.per_class, n_points=args.points,
            noise=args.noise, seed=args.seed)
    formats.write_dataset_dir(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def _model_tokens(args) -> list:
    tokens = ["--task", args.task, "--depth", args.depth,
              "--classes", args.classes, "--seg-classes", args.seg_classes,
              "--carry-dim", args.carry_dim, "--merge", args.merge,
              "--epochs", args.epochs, "--batch-size", args.batch_size,
              "--lr", args.lr, "--patience", args.patience,
              "--val-fraction", args.val_fraction]
    if args.prealign:
        tokens.append("--prealign")
    if args.align_net:
        tokens.append("--align-net")
    if args.no_flip_augment:
        tokens.append("--no-flip-augment")
    return tokens


def _config_from_args(args) -> model.ModelConfig:
    return model.ModelConfig(
        depth=args.depth, num_classes=args.classes,
        num_seg_classes=args.seg_classes, carry_dim=args.carry_dim,
        merge=args.merge, use_prealign=args.prealign,
        use_alignment_net=args.align_net, epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr, patience=args.patience,
        flip_permute_augment=not args.no_flip_augment)


def cmd_train(args) -> int:
    _print_config("train", ["--data", args.data, "--checkpoint", args.checkpoint,
                            "--seed", args.seed] + _model_tokens(args)
                  + (["--metrics", args.metrics] if args.metrics else []))
    records = formats.read_dataset_dir(args.data)
    splits = data_mod.split(records, (1.0 - args.val_fraction, args.val_fraction, 0.0),
                            seed=args.seed)
    config = _config_from_args(args)
    result = model.train(splits, config, seed=args.seed, task=args.task)
    result.store.save(args.checkpoint)
    if args.metrics:
        with open(args.metrics, "w", encoding="ascii") as fh:
            formats.write_metrics_tsv(result.metrics, fh)
    else:
        formats.write_metrics_tsv(result.metrics, sys.stdout)
    print(f"best_epoch={result.best_epoch} "
          f"best_val_accuracy={result.best_val_accuracy:.17g}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    _print_config("eval", ["--data", args.data, "--checkpoint", args.checkpoint,
                           "--seed", args.seed] + _model_tokens(args))
    records = formats.read_dataset_dir(args.data)
    config = _config_from_args(args)
    store = model.init_params(config, seed=args.seed)
    store.load_values(ParamStore.read(args.checkpoint))
    samples = [model.prepare(r, config) for r in records]
    loss, acc = model.evaluate(store, samples, config, args.task)
    print(f"loss {loss:.17g}\naccuracy {acc:.17g}")
    return EXIT_OK


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=("classify", "segment"), default="classify")
    p.add_argument("--depth", type=int, default=7)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seg-classes", type=int, default=2)
    p.add_argument("--carry-dim", type=int, default=32)
    p.add_argument("--merge", choices=("max", "concat-mlp"), default="max")
    p.add_argument("--prealign", action="store_true")
    p.add_argument("--align-net", action="store_true")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--no-flip-augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pointtree")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prealign", help="PCA-normalize a cloud")
    p.add_argument("input")
    p.add_argument("--iterative", action="store_true")
    p.add_argument("--max-iter", type=int, default=20)
    p.set_defaults(func=cmd_prealign)

    p = sub.add_parser("tree", help="build and dump a K-D tree")
    p.add_argument("input")
    p.add_argument("--rule", choices=("axis", "pca"), default="pca")
    p.add_argument("--pad", action="store_true",
                   help="pad to a power of two before building")
    p.set_defaults(func=cmd_tree)

    p = sub.add_parser("ead", help="expected angle difference of two clouds")
    p.add_argument("a")
    p.add_argument("b")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--exact", action="store_true")
    group.add_argument("--samples", type=int, default=10000)
    p.set_defaults(func=cmd_ead)

    p = sub.add_parser("transform", help="apply random transforms to a dataset")
    p.add_argument("input")
    p.add_argument("--dist", choices=("affine", "affine-agg", "projective",
                                      "similarity", "identity"), required=True)
    p.add_argument("--augment", type=int, default=1)
    p.add_argument("--candidates", type=int, default=5000,
                   help="search size for the aggressive distribution")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("gen", help="generate a synthetic benchmark dataset")
    p.add_argument("--benchmark", choices=("classify", "segment"), default="classify")
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--points", type=int, default=128)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_eval)

    for name, cmd in sub.choices.items():
        cmd.add_argument("--seed", type=int, default=0)
        cmd.add_argument("--format", choices=("xyz", "ptc1"), default="xyz")
        if name in ("prealign", "tree"):
            cmd.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _DEGENERACY as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except SamplerStuck as exc:
        print(f"error: SamplerStuck: {exc}", file=sys.stderr)
        return EXIT_SAMPLER
    except _CONTRACT as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
