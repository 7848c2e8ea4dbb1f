"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 a verification check
failed, 3 numeric failure at runtime.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

from . import __version__, experiments
from .config import format_config, parse_config_file
from .dataset import DatasetConfig, dataset_checksum, load_dataset, synth_dataset, write_dataset
from .errors import LarError, NonFiniteError, NonFiniteLossError
from .network import NetworkConfig, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, train, write_embeddings_csv

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_range(text: str) -> range:
    """'3..8' or '5'; an inverted range is empty."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        return range(int(lo), int(hi) + 1)
    return range(int(text), int(text) + 1)


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered not in ("true", "false", "1", "0", "yes", "no"):
        raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")
    return lowered in ("true", "1", "yes")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--config", type=Path, help="flat key = value config file")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--dml-kind", dest="dml_kind", choices=["none", "triplet", "mcnpair", "constellation", "lar"])
    p.add_argument("--lambda-dml", dest="lambda_dml", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--constellation-k", dest="constellation_k", type=int)
    p.add_argument("--multiplier-offset", dest="multiplier_offset", type=float)
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    p.add_argument("--alpha", dest="smoothing_alpha", type=float)
    p.add_argument("--smooth-rounded", dest="smooth_rounded", type=_bool)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="larloss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("verify-geometry", help="check the uniform-angle optimum and perturbation bounds")
    _add_common(p)
    p.add_argument("--labels", type=_int_range, default=range(3, 9), help="label-count range, e.g. 3..8")
    p.add_argument("--seeds", type=_int_list, default=list(range(1, 11)))
    p.add_argument("--perturb-l-max", dest="perturb_l_max", type=int, default=12)
    p.add_argument("--epsilons", type=_float_list, default=list(experiments.DEFAULT_EPSILONS))
    p.add_argument("--relative-epsilons", dest="relative_epsilons", type=_float_list,
                   default=list(experiments.DEFAULT_RELATIVE_EPSILONS),
                   help="fractions of 2*pi/l")
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--samples", type=int, default=10_000, help="random configurations per L")

    p = sub.add_parser("synth", help="write a synthetic radar dataset")
    _add_common(p)
    p.add_argument("--num-labels", dest="num_labels", type=int)
    p.add_argument("--recordings-per-label", dest="recordings_per_label", type=int)
    p.add_argument("--frames-per-recording", dest="frames_per_recording", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--include-slow-time", dest="include_slow_time", type=_bool)

    p = sub.add_parser("train", help="train one loss configuration")
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("ablation", help="train every loss configuration over several seeds")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--seeds", type=_int_list, default=[1, 2, 3])
    p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--alpha", type=float, help="smooth each recording with this factor")
    p.add_argument("--smooth-rounded", dest="smooth_rounded", type=_bool, default=False)
    return parser


def _config_values(args) -> dict[str, str]:
    return parse_config_file(args.config) if args.config else {}


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _write_manifest(out: Path, command: str, config: dict, seed, paths: dict,
                    checksum: str, started: float) -> None:
    values = {"command": command, "seed": seed, "code_version": __version__}
    values.update({f"config.{k}": v for k, v in config.items()})
    values.update({f"path.{k}": str(v) for k, v in paths.items()})
    values["dataset_checksum"] = checksum
    values["wall_clock_seconds"] = round(time.perf_counter() - started, 3)
    (out / MANIFEST_NAME).write_text(format_config(values))


def _train_config(args) -> TrainConfig:
    values = _config_values(args)
    fields = [f.name for f in dataclasses.fields(TrainConfig)]
    values.update(_overrides(args, fields))
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return TrainConfig.from_flat(values)
    except KeyError as exc:
        raise UsageError(f"unknown train config key {exc.args[0]!r}") from exc


def cmd_verify_geometry(args) -> int:
    started = time.perf_counter()
    if len(args.labels) == 0:
        raise UsageError("empty label-count range")
    seeds = [args.seed] if args.seed is not None else args.seeds
    suite = experiments.run_geometry_suite(
        args.labels, seeds, args.perturb_l_max, args.epsilons, args.relative_epsilons,
        args.steps, args.lr, args.restarts, args.samples)
    args.out.mkdir(parents=True, exist_ok=True)
    experiments.write_geometry_suite(suite, args.out)
    config = {"labels": f"{args.labels.start}..{args.labels.stop - 1}", "seeds": seeds,
              "perturb_l_max": args.perturb_l_max, "epsilons": args.epsilons,
              "relative_epsilons": args.relative_epsilons, "steps": args.steps, "lr": args.lr,
              "restarts": args.restarts, "samples": args.samples}
    _write_manifest(args.out, "verify-geometry", config, seeds, {"out": args.out}, "", started)
    failed = ([f"perturbation l={r.l} eps={r.epsilon:g} {r.form}" for r in suite.perturbation if not r.holds]
              + [f"optimization L={r.num_labels} seed={r.seed}" for r in suite.optimization if not r.ok]
              + [f"sampling L={r.num_labels}" for r in suite.sampling if not r.ok])
    for line in failed:
        print(f"FAIL {line}", file=sys.stderr)
    print(f"{len(failed)} failed checks", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_synth(args) -> int:
    started = time.perf_counter()
    values = _config_values(args)
    values.update(_overrides(args, ["num_labels", "recordings_per_label", "frames_per_recording",
                                    "noise_sigma", "test_fraction", "include_slow_time"]))
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        config = DatasetConfig.from_flat(values)
    except KeyError as exc:
        raise UsageError(f"unknown dataset config key {exc.args[0]!r}") from exc
    dataset = synth_dataset(config)
    write_dataset(dataset, args.out)
    _write_manifest(args.out, "synth", config.to_flat(), config.seed,
                    {"out": args.out}, dataset_checksum(args.out), started)
    print(f"wrote {len(dataset.recordings)} recordings, {dataset.num_frames} frames to {args.out}")
    return EXIT_OK


def network_config_text(config: NetworkConfig) -> str:
    return format_config(dataclasses.asdict(config))


def parse_network_config(path: Path) -> NetworkConfig:
    values = parse_config_file(path)
    try:
        return NetworkConfig(
            input_shape=tuple(_int_list(values["input_shape"])),
            feature_maps=tuple(_int_list(values["feature_maps"])),
            kernel=int(values["kernel"]),
            embedding_dim=int(values["embedding_dim"]),
            output_bias=float(values["output_bias"]))
    except KeyError as exc:
        raise UsageError(f"{path}: missing key {exc.args[0]!r}") from exc


def cmd_train(args) -> int:
    started = time.perf_counter()
    config = _train_config(args)
    dataset = load_dataset(args.dataset)
    model, report = train(dataset, config, progress=lambda e: print(
        f"epoch {e.epoch}: mse {e.mse_term:.4f} dml {e.dml_term:.4f} "
        f"acc {e.test_acc:.3f} acc+-1 {e.test_acc_pm1:.3f}", file=sys.stderr))
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out / "train_report.csv")
    save_checkpoint(model, args.out / "model.larm")
    (args.out / "model.cfg").write_text(network_config_text(model.config))
    write_embeddings_csv(model, dataset.split("test"), args.out / "embeddings.csv")
    _write_manifest(args.out, "train", config.to_flat(), config.seed,
                    {"dataset": args.dataset, "out": args.out},
                    dataset_checksum(args.dataset), started)
    return EXIT_OK


def cmd_ablation(args) -> int:
    started = time.perf_counter()
    config = _train_config(args)
    seeds = [args.seed] if args.seed is not None else args.seeds
    dataset = load_dataset(args.dataset)

    def progress(cells):
        for c in cells:
            status = f"failed ({c.error})" if c.failed else f"acc {c.accuracy:.3f} acc+-1 {c.accuracy_pm1:.3f}"
            print(f"seed {c.seed} {c.name}: {status}", file=sys.stderr)

    cells = experiments.run_ablation(dataset, config, seeds, args.jobs, progress)
    experiments.write_ablation(cells, args.out)
    flat = config.to_flat()
    flat.pop("seed")
    flat.pop("dml_kind")
    _write_manifest(args.out, "ablation", flat, seeds, {"dataset": args.dataset, "out": args.out},
                    dataset_checksum(args.dataset), started)
    return EXIT_NUMERIC if any(c.failed for c in cells) else EXIT_OK


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    dataset = load_dataset(args.dataset)
    net_config = parse_network_config(args.checkpoint.with_suffix(".cfg"))
    model = load_checkpoint(args.checkpoint, net_config)
    num_labels = dataset.config.num_labels
    result = evaluate(model, dataset.split("test"), num_labels, args.alpha, args.smooth_rounded)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "metrics.csv", "w") as fh:
        fh.write("accuracy,accuracy_pm1,n_samples\n")
        fh.write(f"{result.accuracy!r},{result.accuracy_pm1!r},{result.n_samples}\n")
    with open(args.out / "confusion.csv", "w") as fh:
        fh.write("true," + ",".join(f"pred_{k}" for k in range(num_labels)) + "\n")
        for k, row in enumerate(result.confusion):
            fh.write(f"{k}," + ",".join(str(int(v)) for v in row) + "\n")
    config = {"alpha": "none" if args.alpha is None else args.alpha, "smooth_rounded": args.smooth_rounded}
    _write_manifest(args.out, "evaluate", config, "", {"dataset": args.dataset, "checkpoint": args.checkpoint,
                                                      "out": args.out},
                    dataset_checksum(args.dataset), started)
    print(f"accuracy {result.accuracy:.4f} accuracy+-1 {result.accuracy_pm1:.4f}")
    return EXIT_OK


COMMANDS = {
    "verify-geometry": cmd_verify_geometry,
    "synth": cmd_synth,
    "train": cmd_train,
    "ablation": cmd_ablation,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (NonFiniteError, NonFiniteLossError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, LarError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
