"""Command line front end for the unlearning pipeline.

Subcommands cover world generation, memorization training, unlearning
with every method, offline null-space initialization, sequential
multi-task runs, and weight sweeps. Each command writes a manifest JSON
next to its primary output with the resolved configuration and sha256
hashes of all inputs and outputs; rerunning with the same inputs yields
byte-identical artifacts.

Config files are flat UTF-8 ``key=value`` lines; ``#`` starts a comment.
Flags override file values, which override built-in defaults.

Exit codes: 0 success, 2 config or input error, 3 training-contract
failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

from . import engine, evaluate, ncu, report, world as world_mod
from .errors import (ConfigError, ContractError, DegenerateInputError,
                     DimensionError, InputError, NumericError,
                     TrainingFailure)
from .losses import LossWeights
from .model import ToyModel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_NUMERIC = 4

METHOD_FLAGS = ("cvf-ncu", "cvf-random", "cvf-only", "nmse", "ga")

WEIGHT_KEYS = ("lam", "alpha", "beta", "tau")


# -- config plumbing ---------------------------------------------------------


def read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, value = text.partition("=")
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = value.strip()
    return values


def apply_config(instance, raw: dict[str, str], skip=()):
    """Rebuild a config dataclass with fields taken from string values,
    coercing each to the type of its default."""
    names = {f.name for f in dataclasses.fields(instance)}
    updates = {}
    for key, text in raw.items():
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(instance, key)
        try:
            updates[key] = type(current)(text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
    return dataclasses.replace(instance, **updates) if updates else instance


def _file_config(path) -> dict[str, str]:
    return read_config_file(path) if path else {}


def build_train_config(args, file_cfg: dict[str, str]) -> engine.TrainConfig:
    cfg = engine.TrainConfig()
    weights = {}
    for key in WEIGHT_KEYS:
        if key in file_cfg:
            try:
                weights[key] = float(file_cfg[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc
    cfg = apply_config(cfg, file_cfg, skip=WEIGHT_KEYS + ("method",))
    if "method" in file_cfg:
        cfg.method = file_cfg["method"].replace("-", "_")
    flag_map = {
        "learning_rate": args.lr, "momentum": args.momentum,
        "epochs": args.epochs, "batch_size_forget": args.batch_forget,
        "batch_size_retain": args.batch_retain, "r": args.r,
        "queue_capacity": args.queue_capacity,
        "queue_membership": args.queue_membership,
        "grad_clip_norm": args.clip, "seed": args.seed,
    }
    for name, value in flag_map.items():
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "method", None) is not None:
        cfg.method = args.method.replace("-", "_")
    for key in WEIGHT_KEYS:
        value = getattr(args, key)
        if value is not None:
            weights[key] = value
    base = cfg.weights
    cfg.weights = LossWeights(
        lam=weights.get("lam", base.lam), alpha=weights.get("alpha", base.alpha),
        beta=weights.get("beta", base.beta), tau=weights.get("tau", base.tau))
    cfg.validate()
    return cfg


def add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--momentum", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-forget", type=int)
    parser.add_argument("--batch-retain", type=int)
    parser.add_argument("--r", type=int)
    parser.add_argument("--queue-capacity", type=int)
    parser.add_argument("--queue-membership", choices=("forget", "retain"))
    parser.add_argument("--clip", type=float)
    for key in WEIGHT_KEYS:
        parser.add_argument(f"--{key}", type=float)


# -- manifest ----------------------------------------------------------------


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path: str, command: str, config: dict, seed: int,
                   inputs: list[str], outputs: list[str]) -> None:
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {p: sha256_file(p) for p in inputs},
        "outputs": {p: sha256_file(p) for p in outputs},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_json(path: str, doc) -> None:
    _write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


# -- world JSON mirror -------------------------------------------------------


def world_to_json(world: world_mod.World) -> dict:
    return {
        "config": dataclasses.asdict(world.config),
        "text_vocab": world.text_vocab,
        "answer_vocab": world.answer_vocab,
        "forget_entity_ids": list(world.forget_entity_ids),
        "retain_entity_ids": list(world.retain_entity_ids),
        "realworld_entity_ids": list(world.realworld_entity_ids),
        "continual_tasks": [list(t) for t in world.continual_tasks]
        if world.continual_tasks else None,
        "entities": [
            {"id": e.id, "name_token": e.name_token,
             "glyph_seed": e.glyph_seed, "facts": [list(f) for f in e.facts]}
            for e in world.entities],
        "samples": [
            {"entity_id": s.entity_id, "modality": s.modality,
             "split": s.split, "answer_id": s.answer_id,
             "question_tokens": list(s.question_tokens),
             "image": None if s.image is None else s.image.tolist()}
            for s in world.samples],
    }


# -- subcommands -------------------------------------------------------------


def cmd_gen_world(args) -> int:
    cfg = world_mod.WorldConfig()
    cfg = apply_config(cfg, _file_config(args.config))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    world = world_mod.generate_world(cfg)
    world_mod.save_world(world, args.out)
    outputs = [args.out]
    if args.dump_json:
        _write_json(args.out + ".json", world_to_json(world))
        outputs.append(args.out + ".json")
    write_manifest(args.out + ".manifest.json", "gen-world",
                   dataclasses.asdict(cfg), cfg.seed,
                   [args.config] if args.config else [], outputs)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = engine.VanillaConfig()
    cfg = apply_config(cfg, _file_config(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
    world = world_mod.load_world(args.world)
    model, record = engine.train_vanilla(world, cfg)
    model.save(args.out)
    _write_text(args.out + ".run.json", record.to_json() + "\n")
    write_manifest(args.out + ".manifest.json", "train",
                   dataclasses.asdict(cfg), cfg.seed,
                   [args.world] + ([args.config] if args.config else []),
                   [args.out, args.out + ".run.json"])
    return EXIT_OK


def cmd_unlearn(args) -> int:
    cfg = build_train_config(args, _file_config(args.config))
    model = ToyModel.load(args.ckpt)
    world = world_mod.load_world(args.world)
    basis = ncu.load_basis(args.basis) if args.basis else None
    before = evaluate.eval_suite(model, world, adapters_enabled=False)
    try:
        unlearned, record = engine.unlearn_static(model, world, cfg, basis)
    except NumericError as exc:
        dump_path = args.out + ".failure.json"
        _write_json(dump_path, {"error": str(exc), "config": cfg.echo()})
        print(f"numeric failure; step dump at {dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    unlearned.save(args.out)
    _write_text(args.out + ".run.json", record.to_json() + "\n")
    reports = {"before": json.loads(before.to_json()),
               "after": record.metrics[-1]}
    _write_json(args.out + ".reports.json", reports)
    report.save_loss_figure(record.epoch_losses, args.out + ".loss.png")
    inputs = [args.ckpt, args.world]
    if args.basis:
        inputs.append(args.basis)
    if args.config:
        inputs.append(args.config)
    write_manifest(args.out + ".manifest.json", "unlearn", cfg.echo(),
                   cfg.seed, inputs,
                   [args.out, args.out + ".run.json",
                    args.out + ".reports.json", args.out + ".loss.png"])
    return EXIT_OK


def cmd_ncu_init(args) -> int:
    model = ToyModel.load(args.ckpt)
    world = world_mod.load_world(args.world)
    seed = args.seed if args.seed is not None else 0
    samples = world.split_samples(world_mod.RETAIN, world_mod.VQA)
    dump = ncu.collect_activations(model, samples, seed=seed)
    basis = ncu.build_basis(dump, args.r)
    ncu.save_basis(basis, args.out)
    probe = model.clone()
    ncu.init_lora_ncu(probe, basis)
    residuals = ncu.verify_nullspace(probe.adapters, dump)
    _write_json(args.out + ".verify.json", residuals)
    write_manifest(args.out + ".manifest.json", "ncu-init",
                   {"r": args.r, "seed": seed}, seed,
                   [args.ckpt, args.world],
                   [args.out, args.out + ".verify.json"])
    return EXIT_OK


def cmd_continual(args) -> int:
    cfg = build_train_config(args, _file_config(args.config))
    model = ToyModel.load(args.ckpt)
    world = world_mod.load_world(args.world)
    if world.continual_tasks is None or len(world.continual_tasks) != args.tasks:
        world = world_mod.partition_continual(world, args.tasks, cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    stage_paths = []

    def save_stage(stage_model, stage_no):
        path = os.path.join(args.out, f"stage{stage_no}.nsuc")
        stage_model.save(path)
        stage_paths.append(path)

    try:
        _, record, stages = engine.unlearn_continual(
            model, world, cfg, stage_callback=save_stage)
    except NumericError as exc:
        dump_path = os.path.join(args.out, "failure.json")
        _write_json(dump_path, {"error": str(exc), "config": cfg.echo()})
        print(f"numeric failure; step dump at {dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    heatmap, heatmap_csv, curves_csv = evaluate.export_continual(stages)
    paths = {name: os.path.join(args.out, name)
             for name in ("heatmap.csv", "curves.csv", "heatmap.png",
                          "curves.png", "run.json")}
    _write_text(paths["heatmap.csv"], heatmap_csv)
    _write_text(paths["curves.csv"], curves_csv)
    report.save_heatmap_figure(heatmap, paths["heatmap.png"])
    report.save_curves_figure(curves_csv, paths["curves.png"])
    _write_text(paths["run.json"], record.to_json() + "\n")
    inputs = [args.ckpt, args.world]
    if args.config:
        inputs.append(args.config)
    write_manifest(os.path.join(args.out, "manifest.json"), "continual",
                   {**cfg.echo(), "tasks": args.tasks}, cfg.seed, inputs,
                   stage_paths + sorted(paths.values()))
    return EXIT_OK


def parse_grid(text: str) -> list[dict]:
    axes = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        key, sep, values_text = part.partition("=")
        key = key.strip()
        if not sep or key not in ("alpha", "beta", "lam"):
            raise ConfigError(f"bad grid axis {part!r}")
        try:
            values = [float(v) for v in values_text.split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad grid values in {part!r}: {exc}") from exc
        if not values:
            raise ConfigError(f"empty grid axis {part!r}")
        axes.append((key, values))
    if not axes:
        raise ConfigError(f"empty grid {text!r}")
    cells = [{}]
    for key, values in axes:
        cells = [{**cell, key: v} for cell in cells for v in values]
    unique, seen = [], set()
    for cell in cells:
        signature = tuple(sorted(cell.items()))
        if signature in seen:
            print(f"warning: duplicate grid cell {cell} skipped", file=sys.stderr)
            continue
        seen.add(signature)
        unique.append(cell)
    return unique


def cmd_sweep(args) -> int:
    cfg = build_train_config(args, _file_config(args.config))
    grid = parse_grid(args.grid)
    model = ToyModel.load(args.ckpt)
    world = world_mod.load_world(args.world)
    csv_text = engine.sweep(model, world, cfg, grid)
    _write_text(args.out, csv_text)
    report.save_sweep_figure(csv_text, args.out + ".png")
    inputs = [args.ckpt, args.world]
    if args.config:
        inputs.append(args.config)
    write_manifest(args.out + ".manifest.json", "sweep",
                   {**cfg.echo(), "grid": args.grid}, cfg.seed, inputs,
                   [args.out, args.out + ".png"])
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmunlearn",
        description="toy multimodal memorize/unlearn pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="synthesize an entity world file")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-json", action="store_true")
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("train", help="memorization stage on a world")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("unlearn", help="run one unlearning method")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--method", choices=METHOD_FLAGS)
    p.add_argument("--out", required=True)
    p.add_argument("--basis")
    add_train_flags(p)
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("ncu-init", help="build the null-space adapter basis")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ncu_init)

    p = sub.add_parser("continual", help="sequential multi-task unlearning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--tasks", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=METHOD_FLAGS)
    add_train_flags(p)
    p.set_defaults(func=cmd_continual)

    p = sub.add_parser("sweep", help="grid of static unlearning runs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--grid", required=True,
                   help='e.g. "alpha=0,0.5,1;beta=0,1"')
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=METHOD_FLAGS)
    add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError, DimensionError, DegenerateInputError,
            ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFailure as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
