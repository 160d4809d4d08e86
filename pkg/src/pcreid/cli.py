from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from importlib.metadata import version
from pathlib import Path
from typing import Any

import inflect
import torch

from .config import DATA_ROOT_VARIABLE, RunConfig, default_data_root, load_config
from .dataset import SyntheticDataset
from .errors import ConfigError, InvalidInputError
from .evaluation import (
    build_gallery_split,
    embed_samples,
    evaluate,
    export_embeddings,
    write_cmc_csv,
    write_report,
)
from .formats import read_lpc, write_lpc
from .geometry import chamfer_distance
from .pretrain import complete_cloud, load_pretrain_network, run_pretraining
from .synth import MANIFEST_NAME, generate_dataset
from .training import load_reid_network, train

logger = logging.getLogger(__name__)
_inflect = inflect.engine()


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML file with run settings")
    parser.add_argument(
        "--seed", type=int, default=0, help="seed of every random choice (default: 0)"
    )


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--data",
        type=Path,
        help=f"dataset directory (default: ${DATA_ROOT_VARIABLE})",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcreid",
        description="Point-cloud person re-identification from multi-view LiDAR sequences.",
    )
    parser.add_argument(
        "--version", action="store_true", help="print the version number and exit"
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log debug output")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    commands = parser.add_subparsers(dest="command", metavar="command")

    synth = commands.add_parser("synth", help="simulate a multi-view LiDAR dataset")
    _add_common(synth)
    synth.add_argument("--out", type=Path, required=True, help="dataset directory to write")
    synth.add_argument("--ids", type=int, help="number of pedestrians")
    synth.add_argument("--views", type=int, help="number of sensors")
    synth.add_argument("--frames", type=int, help="frames per sequence")
    synth.add_argument("--sequences", type=int, help="sequences per identity and view")
    synth.add_argument("--workers", type=int, help="simulation processes")
    synth.add_argument(
        "--disjoint-test-views",
        action="store_true",
        default=None,
        help="let every view of a test identity observe a different time window",
    )
    synth.set_defaults(handler=cmd_synth)

    pretrain = commands.add_parser("pretrain", help="pre-train the encoder (completion + shape)")
    _add_common(pretrain)
    _add_data(pretrain)
    pretrain.add_argument("--out", type=Path, required=True, help="run directory")
    pretrain.add_argument("--epochs", type=int, help="number of epochs")
    pretrain.add_argument("--resume", type=Path, help="pre-training checkpoint to continue")
    pretrain.set_defaults(handler=cmd_pretrain)

    train_parser = commands.add_parser("train", help="train the ReID network")
    _add_common(train_parser)
    _add_data(train_parser)
    train_parser.add_argument("--out", type=Path, required=True, help="run directory")
    train_parser.add_argument("--epochs", type=int, help="number of epochs")
    init = train_parser.add_mutually_exclusive_group()
    init.add_argument("--init", type=Path, help="pre-training checkpoint for the encoder")
    init.add_argument("--resume", type=Path, help="ReID checkpoint to continue")
    train_parser.set_defaults(handler=cmd_train)

    eval_parser = commands.add_parser("eval", help="evaluate cross-view retrieval")
    _add_common(eval_parser)
    _add_data(eval_parser)
    eval_parser.add_argument("--checkpoint", type=Path, required=True, help="ReID checkpoint")
    eval_parser.add_argument("--out", type=Path, required=True, help="report directory")
    eval_parser.add_argument("--sequence-length", type=int, help="leading frames to use")
    eval_parser.add_argument(
        "--export-embeddings", type=Path, metavar="FILE", help="write embeddings to a .npz"
    )
    eval_parser.set_defaults(handler=cmd_eval)

    complete = commands.add_parser("complete", help="export completions of .lpc files")
    _add_common(complete)
    complete.add_argument(
        "--checkpoint", type=Path, required=True, help="pre-training checkpoint"
    )
    complete.add_argument("inputs", type=Path, nargs="+", help="normalized .lpc clouds")
    complete.add_argument(
        "--truth", type=Path, nargs="+", help="ground truth .lpc files, one per input"
    )
    complete.add_argument("--out", type=Path, help="output directory (default: next to inputs)")
    complete.set_defaults(handler=cmd_complete)
    return parser


def _config(args: argparse.Namespace, overrides: dict[str, Any]) -> RunConfig:
    if args.config is not None and not args.config.is_file():
        raise ConfigError(f"config file {args.config} does not exist")

    return load_config(args.config, overrides)


def _dataset(args: argparse.Namespace) -> SyntheticDataset:
    root = args.data or default_data_root()
    if root is None:
        raise ConfigError(f"no dataset given: pass --data or set ${DATA_ROOT_VARIABLE}")

    if not (root / MANIFEST_NAME).is_file():
        raise ConfigError(f"{root} holds no dataset manifest")

    return SyntheticDataset(root)


def _require_file(path: Path | None, what: str) -> None:
    if path is not None and not path.is_file():
        raise ConfigError(f"{what} {path} does not exist")


def _output_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc

    return path


def cmd_synth(args: argparse.Namespace) -> None:
    config = _config(
        args,
        {
            "synth": {
                "identities": args.ids,
                "views": args.views,
                "frames": args.frames,
                "sequences_per_view": args.sequences,
                "workers": args.workers,
                "disjoint_test_views": args.disjoint_test_views,
            }
        },
    )
    out = _output_dir(args.out)
    manifest = generate_dataset(config.synth, out, args.seed)
    sequences = manifest["sequences"]
    frames = sum(len(record["frames"]) for record in sequences)
    print(
        f"Wrote {_inflect.no('sequence', len(sequences))} "
        f"({_inflect.no('frame', frames)}) of "
        f"{_inflect.no('identity', len(manifest['identities']))} "
        f"from {_inflect.no('view', config.synth.views)} to {out}"
    )


def cmd_pretrain(args: argparse.Namespace) -> None:
    config = _config(args, {"pretrain": {"epochs": args.epochs}})
    dataset = _dataset(args)
    _require_file(args.resume, "checkpoint")
    out = _output_dir(args.out)
    result = run_pretraining(dataset, config, out, args.seed, resume=args.resume)
    print(f"Pre-trained for {_inflect.no('epoch', config.pretrain.epochs)}: {result.checkpoint}")


def cmd_train(args: argparse.Namespace) -> None:
    config = _config(args, {"train": {"epochs": args.epochs}})
    dataset = _dataset(args)
    _require_file(args.init, "checkpoint")
    _require_file(args.resume, "checkpoint")
    out = _output_dir(args.out)
    result = train(dataset, config, out, args.seed, init=args.init, resume=args.resume)
    print(f"Trained for {_inflect.no('epoch', result.epochs)}: {result.checkpoint}")


def cmd_eval(args: argparse.Namespace) -> None:
    config = _config(args, {"evaluate": {"sequence_length": args.sequence_length}})
    dataset = _dataset(args)
    _require_file(args.checkpoint, "checkpoint")
    out = _output_dir(args.out)
    network, network_config = load_reid_network(args.checkpoint)
    samples = list(dataset.iter_samples("test"))
    if not samples:
        raise InvalidInputError(f"{dataset.root} has no test sequences")

    split = build_gallery_split(
        [sample.identity for sample in samples], [sample.view for sample in samples], args.seed
    )
    embeddings = embed_samples(
        network,
        samples,
        network_config.encoder.points,
        args.seed,
        config.evaluate.sequence_length,
    )
    report = evaluate(split, embeddings)
    conditions = [dataset.condition_of(sample.identity) for sample in samples]
    write_report(report, out / "report.txt", config.evaluate.ranks, conditions)
    write_cmc_csv(report, out / "cmc.csv")
    if args.export_embeddings is not None:
        export_embeddings(args.export_embeddings, split, embeddings)

    print(f"rank1={report.rank(1):.4f} rank3={report.rank(3):.4f} map={report.mean_ap:.4f}")


def cmd_complete(args: argparse.Namespace) -> None:
    for path in args.inputs:
        _require_file(path, "input")

    if args.truth is not None:
        if len(args.truth) != len(args.inputs):
            raise ConfigError(
                f"got {len(args.truth)} ground truth files for {len(args.inputs)} inputs"
            )

        for path in args.truth:
            _require_file(path, "ground truth")

    _require_file(args.checkpoint, "checkpoint")
    network, config = load_pretrain_network(args.checkpoint)
    truths = args.truth or [None] * len(args.inputs)
    for index, (path, truth_path) in enumerate(zip(args.inputs, truths)):
        out = _output_dir(args.out) if args.out else path.parent
        cloud = read_lpc(path)
        coarse, detail = complete_cloud(
            network, cloud, config.encoder.points, seed=args.seed + index
        ).clouds()
        stem = path.name.removesuffix(".lpc")
        write_lpc(out / f"{stem}.input.lpc", cloud)
        write_lpc(out / f"{stem}.coarse.lpc", coarse)
        write_lpc(out / f"{stem}.detail.lpc", detail)
        line = f"{path}: coarse={len(coarse)} detail={len(detail)}"
        if truth_path is not None:
            line += f" chamfer={chamfer_distance(detail, read_lpc(truth_path)):.6f}"

        print(line)


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(
        level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        print(version("pcreid"))
        return 0

    if not args.command:
        parser.print_help(sys.stderr)
        return 2

    _configure_logging(args)
    torch.use_deterministic_algorithms(True, warn_only=True)
    handler: Callable[[argparse.Namespace], None] = args.handler
    try:
        handler(args)
    except ConfigError as exc:
        print(f"pcreid {args.command}: {exc}", file=sys.stderr)
        return 2
    except (InvalidInputError, LookupError, OSError, RuntimeError) as exc:
        print(f"pcreid {args.command}: {exc}", file=sys.stderr)
        return 1

    return 0
