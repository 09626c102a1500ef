"""Command-line entry point: ``s3d {gen-data,pretrain,train,eval,analyze}``.

Config files are JSON objects whose keys are ``TrainConfig`` fields plus an
optional ``"dataset"`` object of ``DomainSpec`` fields. Command-line flags
override the file. See README for the schema.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import datagen, harness, selection, trainer
from . import model as model_mod
from .datagen import DomainSpec
from .rng import stream
from .trainer import ConfigError, TrainConfig

logger = logging.getLogger("s3d")

CONFIG_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
DATASET_FIELDS = {f.name for f in dataclasses.fields(DomainSpec)}


class CliError(Exception):
    """Failure reported as ``error: ...`` with exit code 1."""


def load_config(path: str | None, overrides: dict) -> tuple[TrainConfig, DomainSpec]:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be a JSON object")
    raw = dict(raw)
    ds_raw = raw.pop("dataset", {})
    if not isinstance(ds_raw, dict):
        raise ConfigError("dataset", "must be a JSON object")
    for key in raw:
        if key not in CONFIG_FIELDS:
            raise ConfigError(key, "unknown field")
    for key in ds_raw:
        if key not in DATASET_FIELDS:
            raise ConfigError(f"dataset.{key}", "unknown field")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for key, value in raw.items():
        want = types[key]
        ok = {
            "int": isinstance(value, int) and not isinstance(value, bool),
            "float": isinstance(value, (int, float)) and not isinstance(value, bool),
            "str": isinstance(value, str),
        }.get(want, isinstance(value, list) and all(isinstance(v, bool) for v in value))
        if not ok:
            raise ConfigError(key, f"expected {want}, got {type(value).__name__}")
    config = TrainConfig(**raw)
    try:
        spec = DomainSpec.from_dict(ds_raw) if ds_raw else DomainSpec()
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError("dataset", str(exc)) from exc
    return config, spec


def _arch(config: TrainConfig, spec_or_splits) -> model_mod.ArchConfig:
    if isinstance(spec_or_splits, DomainSpec):
        c, h, w = spec_or_splits.image_shape
        k = spec_or_splits.num_classes
    else:
        c, h, w = spec_or_splits.image_shape
        k = spec_or_splits.num_classes
    return model_mod.ArchConfig(in_channels=c, height=h, width=w, num_classes=k,
                                temperature=config.temperature, hooks=config.hooks)


def _load_data(args, config: TrainConfig, spec: DomainSpec) -> datagen.DatasetSplits:
    if args.data is not None:
        return datagen.read_dataset(args.data)
    return datagen.build_dataset(spec, config.shots, config.val_per_class, config.seed)


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _run_pretrain(args, config, splits, out: Path):
    model = model_mod.init_model(_arch(config, splits), stream(config.seed, "init"))
    res = trainer.pretrain(model, splits, config, stream(config.seed, "pretrain"))
    delta = selection.average_margin(model, splits.target_unlabeled.x)
    model_mod.save_checkpoint(model, out / "pretrained.ckpt", iteration=res.best_iteration, seed=config.seed,
                              extra={"stage": "pretrain", "val_acc": res.best_val_acc, "delta": delta})
    (out / "delta.json").write_text(json.dumps({"delta": delta, "iteration": res.best_iteration}, sort_keys=True)
                                    + "\n")
    _write_jsonl(out / "pretrain_metrics.jsonl", res.log)
    return model, delta, res


def cmd_gen_data(args, config, spec) -> dict:
    splits = datagen.build_dataset(spec, config.shots, config.val_per_class, config.seed)
    datagen.write_dataset(splits, args.out, spec=spec)
    return {"dataset": str(args.out), "sizes": {n: len(getattr(splits, n)) for n in datagen.SPLITS}}


def cmd_pretrain(args, config, spec) -> dict:
    splits = _load_data(args, config, spec)
    model, delta, res = _run_pretrain(args, config, splits, args.out)
    return {"checkpoint": str(args.out / "pretrained.ckpt"), "delta": delta, "val_acc": res.best_val_acc}


def cmd_train(args, config, spec) -> dict:
    t0 = time.perf_counter()
    out: Path = args.out
    splits = _load_data(args, config, spec)
    if args.checkpoint is not None:
        model, header = model_mod.load_checkpoint(args.checkpoint)
        delta = header.get("extra", {}).get("delta")
        if delta is None:
            delta = selection.average_margin(model, splits.target_unlabeled.x)
    else:
        model, delta, _ = _run_pretrain(args, config, splits, out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    def on_validate(it, m, rec):
        model_mod.save_checkpoint(m, ckpt_dir / f"iter_{it:06d}.ckpt", iteration=it, seed=config.seed,
                                  extra={"mode": config.mode, "val_acc": rec["val_acc"]})

    res = trainer.train_s3d(model, splits, config, delta, stream(config.seed, "s3d"),
                            diagnostics=trainer.pseudo_label_precision(splits), on_validate=on_validate)
    _write_jsonl(out / "metrics.jsonl", res.log)
    model_mod.save_checkpoint(model, out / "final.ckpt", iteration=res.best_iteration, seed=config.seed,
                              extra={"mode": config.mode, "val_acc": res.best_val_acc, "delta": delta})
    report = harness.RunReport(
        mode=config.mode, seed=config.seed, config_digest=harness.config_digest(config.to_dict()),
        accuracy=harness.split_accuracies(model, splits), wall_clock_seconds=time.perf_counter() - t0,
        best_iteration=res.best_iteration, iterations=res.iterations,
    )
    report.write(out / "report.json")
    return report.to_dict()


def cmd_eval(args, config, spec) -> dict:
    t0 = time.perf_counter()
    splits = _load_data(args, config, spec)
    if args.checkpoint is not None:
        model, header = model_mod.load_checkpoint(args.checkpoint)
        iteration = int(header.get("iteration", 0))
    else:
        model, iteration = model_mod.init_model(_arch(config, splits), stream(config.seed, "init")), 0
    report = harness.RunReport(
        mode=config.mode, seed=config.seed, config_digest=harness.config_digest(config.to_dict()),
        accuracy=harness.split_accuracies(model, splits), wall_clock_seconds=time.perf_counter() - t0,
        best_iteration=iteration,
    )
    report.write(args.out / "eval.json")
    return report.to_dict()


def cmd_analyze(args, config, spec) -> dict:
    splits = _load_data(args, config, spec)
    paths = args.checkpoint_list or []
    if not paths:
        raise CliError("analyze needs at least one --checkpoint")
    checkpoints, written = [], []
    for p in paths:
        model, header = model_mod.load_checkpoint(p)
        checkpoints.append((int(header.get("iteration", 0)), model))
        csv_path = args.out / f"embeddings_{Path(p).stem}.csv"
        harness.export_embeddings(model, splits, csv_path)
        written.append(str(csv_path))
    series = harness.similarity_histograms(checkpoints, splits, seed=config.seed)
    harness.write_histograms(series, args.out / "histograms.json")
    return {"histograms": str(args.out / "histograms.json"), "embeddings": written,
            "means": [{"population": h.population, "iteration": h.iteration, "mean": h.mean} for h in series]}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--mode", choices=trainer.MODES, help="training objective")
    common.add_argument("--shots", type=int, help="labeled target samples per class")
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--data", type=Path, help="dataset directory (default: generate from config)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="s3d", description="Sample-to-sample self-distillation experiments")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("gen-data", parents=[common], help="generate and write a dataset")
    sub.add_parser("pretrain", parents=[common], help="supervised pre-training")
    p = sub.add_parser("train", parents=[common], help="pre-train (or load) then self-distill")
    p.add_argument("--checkpoint", type=Path, help="pre-trained checkpoint to start from")
    p = sub.add_parser("eval", parents=[common], help="per-split accuracy of a checkpoint")
    p.add_argument("--checkpoint", type=Path, help="checkpoint (default: untrained model)")
    p = sub.add_parser("analyze", parents=[common], help="similarity histograms and embedding CSVs")
    p.add_argument("--checkpoint", dest="checkpoint_list", type=Path, action="append",
                   help="checkpoint to analyse; repeatable")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config, spec = load_config(args.config, {"seed": args.seed, "mode": args.mode, "shots": args.shots})
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](args, config, spec)
    except (CliError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
