"""``vlplab`` command line: gen-data, train, eval, verify.

Exit codes: 0 ok, 1 verification failure, 2 usage or config error,
3 file error, 4 non-finite loss, 5 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import ConfigError, TrainConfig, apply_overrides, config_hash, to_config_text, validate, with_preset
from .config import PRESETS
from .evaldata import (CorruptRecord, DataConfig, MissingImageFile, NoClasses, collect,
                       generate_synthetic_dataset, load_dataset, load_prompts, zeroshot_classify)
from .model import BadConfig
from .tensorlab import TensorError
from .trainer import CheckpointMismatch, NonFiniteGradient, NumericAbort, load_checkpoint, run_epochs
from .verify import LOSS_GRADIENTS, format_table, run_battery

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = 0, 1, 2, 3, 4, 5

log = logging.getLogger("vlplab")


class UsageError(Exception):
    pass


def _env_seed() -> int | None:
    raw = os.environ.get("VLPLAB_SEED")
    if raw is None or not raw.strip():
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"VLPLAB_SEED must be an integer, got {raw!r}", "seed") from None


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    cfg = DataConfig(samples_per_class=args.samples_per_class, heldout_per_class=args.heldout_per_class,
                     image_size=args.image_size, noise_level=args.noise, seed=seed)
    summary = generate_synthetic_dataset(args.out, cfg)
    print(f"classes: {summary['classes']}")
    print(f"train samples: {summary['train']}")
    print(f"held-out samples: {summary['heldout']}")
    print(f"bytes written: {summary['bytes']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


FLAG_KEYS = {"method": "method", "recipe": "recipe", "num_augs": "num_augs",
             "label_smoothing": "label_smoothing", "alpha": "alpha", "beta": "beta", "lr": "lr",
             "epochs": "epochs", "batch_size": "batch_size", "dropout_prob": "dropout_prob",
             "weight_decay": "weight_decay", "eval_every": "eval_every"}


def _read_config_file(path: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as err:
        raise ConfigError(f"unparseable config {path}: {err}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def resolve_config(args) -> TrainConfig:
    """Defaults, then preset, then config file, then flags. Seed falls back to VLPLAB_SEED."""
    cfg = TrainConfig()
    if args.preset:
        cfg = with_preset(cfg, args.preset)
    file_overrides = _read_config_file(args.config) if args.config else {}
    cfg = apply_overrides(cfg, file_overrides)
    flags: dict[str, dict[str, object]] = {"train": {}}
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr)
        if value is not None:
            flags["train"][key] = value
    if args.log_timing:
        flags["train"]["log_timing"] = True
    if args.seed is not None:
        flags["train"]["seed"] = args.seed
    elif "seed" not in file_overrides.get("train", {}):
        env = _env_seed()
        if env is not None:
            flags["train"]["seed"] = env
    for item in args.set or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().rpartition(".")
        if not sep or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}", key)
        flags.setdefault(section if dot else "train", {})[name] = value
    return validate(apply_overrides(cfg, flags))


def _data_paths(root: Path):
    train = root / "train" if (root / "train").is_dir() else root
    heldout = root / "heldout"
    prompts = root / "prompts.json"
    return train, (heldout if heldout.is_dir() else None), (prompts if prompts.is_file() else None)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    train_dir, heldout_dir, prompts_path = _data_paths(Path(args.data))
    if not (train_dir / "samples.jsonl").is_file():
        raise FileNotFoundError(f"no samples.jsonl under {train_dir}")
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "artifact_version": __version__, "config_hash": config_hash(cfg), "seed": cfg.seed,
        "config": to_config_text(cfg), "started": _now(), "finished": None,
        "outputs": {"metrics": "metrics.csv", "checkpoint": "checkpoint", "config": "config.ini"},
        "data": str(Path(args.data)),
    }
    (out / "config.ini").write_text(manifest["config"], encoding="utf-8", newline="\n")
    _write_json(out / "run_manifest.json", manifest)
    train = collect(load_dataset(train_dir))
    heldout = collect(load_dataset(heldout_dir)) if heldout_dir else None
    prompts = load_prompts(prompts_path) if prompts_path else None
    log.info("training %s (%s recipe, %d strong views) on %d pairs", cfg.method, cfg.recipe, cfg.n_strong, len(train))
    result = run_epochs(cfg, train, heldout, prompts, out_dir=out)
    manifest["finished"] = _now()
    _write_json(out / "run_manifest.json", manifest)
    if result.final_accuracy is not None:
        print(f"final zero-shot accuracy: {result.final_accuracy:.4f}")
    print(f"metrics: {out / 'metrics.csv'}")
    print(f"checkpoint: {out / 'checkpoint'}")
    return EXIT_OK


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "manifest.txt").is_file() and (ckpt / "checkpoint" / "manifest.txt").is_file():
        ckpt = ckpt / "checkpoint"
    for name in ("manifest.txt", "config.ini"):
        if not (ckpt / name).is_file():
            raise FileNotFoundError(f"{ckpt / name} not found")
    state, _ = load_checkpoint(ckpt)
    root = Path(args.data)
    split = root / args.split if (root / args.split).is_dir() else root
    prompts_path = Path(args.prompts) if args.prompts else root / "prompts.json"
    if not prompts_path.is_file():
        raise FileNotFoundError(f"{prompts_path} not found")
    data = collect(load_dataset(split))
    prompts = load_prompts(prompts_path)
    if any(label is None for label in data.labels):
        raise CorruptRecord("evaluation samples need a class label", 0)
    result = zeroshot_classify(state, data.images, prompts, data.labels)
    accuracy = result.accuracy if result.accuracy is not None else float("nan")
    print(f"zero-shot accuracy: {accuracy:.4f} ({len(data)} images, {len(result.classes)} classes)")
    for cls, (n, correct) in result.per_class.items():
        print(f"  {cls:<20} {correct:>4}/{n:<4} {correct / n if n else float('nan'):.4f}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["class", "n", "correct", "accuracy"])
            for cls, (n, correct) in result.per_class.items():
                writer.writerow([cls, n, correct, format(correct / n, ".6f") if n else ""])
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    results = run_battery(seed=args.seed if args.seed is not None else (_env_seed() or 0), fault=args.inject_fault)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAILED: {r.group}/{r.name}", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlplab", description="Desk-scale vision-language pre-training lab.")
    parser.add_argument("--version", action="version", version=f"vlplab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic captioned shapes dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--samples-per-class", type=int, default=100)
    g.add_argument("--heldout-per-class", type=int, default=20)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--noise", type=float, default=0.05)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one method/recipe and write metrics plus a checkpoint")
    t.add_argument("--data", required=True, help="dataset root written by gen-data")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--config", help="INI-style config file")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--method")
    t.add_argument("--recipe")
    t.add_argument("--num-augs", dest="num_augs", type=int)
    t.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--dropout-prob", dest="dropout_prob", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log-timing", action="store_true", help="fill the elapsed_s metrics column")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint directory (or the run directory)")
    e.add_argument("--data", required=True, help="dataset root or split directory")
    e.add_argument("--split", default="heldout")
    e.add_argument("--prompts", help="class-prompt JSON (default: <data>/prompts.json)")
    e.add_argument("--csv", help="write per-class results here")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the gradient and property battery")
    v.add_argument("--seed", type=int)
    v.add_argument("--inject-fault", choices=sorted(LOSS_GRADIENTS), help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, BadConfig) as err:
        key = getattr(err, "key", None)
        print(f"config error{f' [{key}]' if key else ''}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatch as err:
        print(f"checkpoint mismatch: {err}", file=sys.stderr)
        return EXIT_MISMATCH
    except (NumericAbort, NonFiniteGradient) as err:
        print(f"numeric abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorruptRecord, MissingImageFile, NoClasses, TensorError, OSError, ValueError) as err:
        print(f"file error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
