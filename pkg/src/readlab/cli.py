"""Command-line entry point: train, sweep, report, gradcheck.

Config files are flat JSON; unknown keys are hard errors. Precedence is
flags > config file > built-in defaults. Exit codes: 0 ok, 2 usage or
config error, 3 training abort. ``READ_LAB_OUTDIR`` sets the default
output root.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import os
import re
import sys
from pathlib import Path

import torch

from . import evaluate, gradcheck
from . import trainer as trainer_mod
from .checkpoint import load_checkpoint, load_module_arrays
from .classifier import ClassifierHead, Encoder
from .corpus import (Example, Vocabulary, encode_examples, load_label_text, synth_grammar)
from .errors import CheckpointError, ConfigError, CorpusError, ReadLabError
from .generator import TokenGenerator
from .nn_utils import stream_seed
from .trainer import VARIANTS, TrainConfig

DATASET_KEYS = {
    "dataset": "synth",          # "synth" or "file"
    "synth_classes": 2,
    "synth_train": 1000,
    "synth_test": 500,
    "synth_seed": 0,
    "data_path": None,
    "test_path": None,
    "data_format": "tsv",        # "tsv" or "trec"
    "label_field": "coarse",
    "encoding": "utf-8",
    "outdir": None,
}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def load_config_file(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a flat JSON object")
    unknown = sorted(set(data) - TRAIN_KEYS - set(DATASET_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return data


def resolve_config(file_cfg: dict, overrides: dict) -> tuple[TrainConfig, dict]:
    """Merge defaults, config file and flag overrides into final settings."""
    merged = dict(file_cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    train_cfg = TrainConfig.from_dict({k: v for k, v in merged.items() if k in TRAIN_KEYS})
    data_cfg = dict(DATASET_KEYS)
    data_cfg.update({k: v for k, v in merged.items() if k in DATASET_KEYS})
    return train_cfg, data_cfg


def build_dataset(data_cfg: dict) -> tuple[list[Example], list[Example], str]:
    """Materialize (train, test, checksum) from the dataset settings."""
    if data_cfg["dataset"] == "synth":
        n_classes = int(data_cfg["synth_classes"])
        base_seed = int(data_cfg["synth_seed"])
        train = synth_grammar(base_seed, int(data_cfg["synth_train"]))
        if n_classes != 2:
            raise ConfigError("the built-in grammar currently provides 2 classes")
        test = synth_grammar(stream_seed(base_seed, "synth-test"),
                             int(data_cfg["synth_test"]))
        h = hashlib.sha256()
        for ex in list(train) + list(test):
            h.update(f"{ex.label}\t{ex.text}\n".encode("utf-8"))
        return train, test, "sha256:" + h.hexdigest()
    if data_cfg["dataset"] == "file":
        if not data_cfg["data_path"] or not data_cfg["test_path"]:
            raise ConfigError("file dataset needs data_path and test_path")
        train, label_map = load_label_text(data_cfg["data_path"],
                                           label_field=data_cfg["label_field"],
                                           encoding=data_cfg["encoding"])
        test, _ = load_label_text(data_cfg["test_path"],
                                  label_field=data_cfg["label_field"],
                                  encoding=data_cfg["encoding"], label_map=label_map)
        h = hashlib.sha256()
        h.update(Path(data_cfg["data_path"]).read_bytes())
        h.update(Path(data_cfg["test_path"]).read_bytes())
        return train, test, "sha256:" + h.hexdigest()
    raise ConfigError(f"unknown dataset kind {data_cfg['dataset']!r}")


def default_outdir_root() -> Path:
    return Path(os.environ.get("READ_LAB_OUTDIR", "runs"))


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_manifest(outdir: Path, payload: dict) -> None:
    tmp = outdir / "manifest.json.tmp"
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.rename(outdir / "manifest.json")


def cmd_train(args: argparse.Namespace) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    overrides = {"variant": args.variant, "label_fraction": args.fraction,
                 "seed": args.seed, "outdir": args.outdir}
    train_cfg, data_cfg = resolve_config(file_cfg, overrides)
    train_examples, test_examples, checksum = build_dataset(data_cfg)
    outdir = Path(data_cfg["outdir"]) if data_cfg["outdir"] else (
        default_outdir_root()
        / f"train-{train_cfg.variant}-f{train_cfg.label_fraction}-s{train_cfg.seed}")
    outdir.mkdir(parents=True, exist_ok=True)
    data_cfg["outdir"] = str(outdir)

    started = _now()
    manifest = {
        "config": {**train_cfg.to_dict(), **data_cfg},
        "dataset_checksum": checksum,
        "seed": train_cfg.seed,
        "artifacts": {
            "metrics": str(outdir / "metrics.jsonl"),
            "vocab": str(outdir / "vocab.txt"),
            "final_checkpoint": str(outdir / f"ckpt-{train_cfg.outer_iterations}"),
        },
        "started_at": started,
    }
    try:
        trainer_mod.run(train_cfg, train_examples, test_examples, outdir=outdir,
                        resume_from=args.resume)
    except ReadLabError as exc:
        manifest.update({"ended_at": _now(), "outcome": f"aborted: {exc}"})
        _write_manifest(outdir, manifest)
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    manifest.update({"ended_at": _now(), "outcome": "ok"})
    _write_manifest(outdir, manifest)
    return 0


def parse_int_list(text: str) -> list[int]:
    text = text.strip()
    m = re.fullmatch(r"(-?\d+)\.\.(-?\d+)", text)
    if m:
        lo, hi = int(m.group(1)), int(m.group(2))
        if hi < lo:
            raise ConfigError(f"empty range {text!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"cannot parse integer list {text!r}")


def parse_float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"cannot parse number list {text!r}")


def cmd_sweep(args: argparse.Namespace) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    train_cfg, data_cfg = resolve_config(file_cfg, {"outdir": args.outdir})
    fractions = parse_float_list(args.fractions)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = parse_int_list(args.seeds)
    if not fractions or not variants or not seeds:
        raise ConfigError("sweep grid must be non-empty")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; valid: {', '.join(VARIANTS)}")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"fraction {f} outside (0, 1]")
    train_examples, test_examples, _ = build_dataset(data_cfg)
    outdir = Path(data_cfg["outdir"]) if data_cfg["outdir"] else (
        default_outdir_root() / "sweep")
    evaluate.sweep(train_cfg, train_examples, test_examples, fractions, variants,
                   seeds, outdir, jobs=args.jobs)
    return 0


def _load_run(run_dir: Path):
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no manifest.json in {run_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg_all = manifest["config"]
    train_cfg = TrainConfig.from_dict({k: v for k, v in cfg_all.items() if k in TRAIN_KEYS})
    data_cfg = {k: cfg_all.get(k, v) for k, v in DATASET_KEYS.items()}
    ckpts = sorted((p for p in run_dir.glob("ckpt-*") if p.is_dir()),
                   key=lambda p: int(p.name.split("-")[1]))
    if not ckpts:
        raise CheckpointError(f"no checkpoint directories in {run_dir}")
    vocab_path = run_dir / "vocab.txt"
    if not vocab_path.exists():
        raise CheckpointError(f"no vocab.txt in {run_dir}")
    vocab = Vocabulary.load(vocab_path)
    arrays, ckpt_meta = load_checkpoint(ckpts[-1])
    return train_cfg, data_cfg, vocab, arrays, ckpt_meta


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    train_cfg, data_cfg, vocab, arrays, ckpt_meta = _load_run(run_dir)
    k = int(ckpt_meta["k"])
    encoder = Encoder(vocab.size, train_cfg.enc_embed_dim, train_cfg.d)
    head = ClassifierHead(train_cfg.d, k)
    load_module_arrays(encoder, arrays, "model/encoder")
    load_module_arrays(head, arrays, "model/head")
    train_examples, test_examples, _ = build_dataset(data_cfg)

    if args.kind == "features":
        examples = encode_examples(test_examples, vocab, train_cfg.max_len)
        evaluate.export_features(encoder, examples, run_dir / "features.tsv")
        return 0
    # generated-text report needs the token generator
    if not any(name.startswith("model/generator/") for name in arrays):
        raise CheckpointError(
            f"run variant {ckpt_meta.get('variant')!r} has no token generator checkpoint")
    generator = TokenGenerator(vocab.size, train_cfg.embed_dim, train_cfg.state_dim,
                               train_cfg.gen_ff_width, train_cfg.gen_ff_layers,
                               train_cfg.gen_dropout)
    load_module_arrays(generator, arrays, "model/generator")
    real = encode_examples(train_examples, vocab, train_cfg.max_len)
    evaluate.generation_report(generator, encoder, vocab, real, args.n,
                               stream_seed(train_cfg.seed, "report"),
                               max_len=train_cfg.max_len,
                               path=run_dir / "gen_report.tsv")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = gradcheck.run_gradcheck(args.component, corrupt=args.corrupt)
    ok = True
    for name, err in results.items():
        status = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        ok = ok and err < gradcheck.TOLERANCE
        print(f"{name}: worst relative error {err:.3e} [{status}]")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="readlab",
                                     description="Semi-supervised adversarial text lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training configuration")
    p_train.add_argument("--config", help="flat JSON config file")
    p_train.add_argument("--variant", choices=VARIANTS)
    p_train.add_argument("--fraction", type=float, dest="fraction")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--outdir")
    p_train.add_argument("--resume", help="checkpoint directory to resume from")
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="grid of (variant, fraction, seed) runs")
    p_sweep.add_argument("--config", help="flat JSON config file")
    p_sweep.add_argument("--fractions", required=True)
    p_sweep.add_argument("--variants", required=True)
    p_sweep.add_argument("--seeds", required=True)
    p_sweep.add_argument("--outdir")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="artifacts from a finished run")
    p_report.add_argument("--run", required=True)
    p_report.add_argument("--kind", choices=("gen", "features"), required=True)
    p_report.add_argument("--n", type=int, default=50)
    p_report.set_defaults(func=cmd_report)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--component", choices=gradcheck.COMPONENTS + ("all",),
                        default="all")
    p_grad.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook
    p_grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, CorpusError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ReadLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
