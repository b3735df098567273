"""Command-line surface: generate, train, evaluate, gradcheck, inspect.

Configuration is a flat UTF-8 ``key = value`` file with ``#`` comments and
dotted keys (``train.epochs = 50``). Unknown keys are rejected by name;
values that fail to convert report their line number. Every command is
reproducible from (config file, seed): re-running overwrites its outputs
with identical bytes.

Exit codes: 0 success, 1 domain error with a one-line diagnostic on stderr,
2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .datamodel import (
    ModalityDescriptor,
    load_manifest,
    preset_config,
    read_stream_header,
)
from .errors import (
    ConfigurationError,
    DatasetError,
    MmfuseError,
    ParseError,
)
from .evaluation import (
    compute_metrics,
    aggregate_runs,
    predict_record,
    prefix_decision,
    write_metrics,
    write_predictions,
    write_window_predictions,
)
from .synthgen import SynthSpec, generate_dataset
from .training import TrainConfig, grad_check, load_checkpoint, restore_model, train

__all__ = ["Config", "load_config", "run_command", "main"]

_PRESETS = ("synth", "dvlog", "daicwoz", "edaic")

# published per-dataset settings: window length, attention heads, and the
# presence gate differ between corpora while d and depth stay fixed
_PRESET_TRAIN_DEFAULTS: dict[str, dict] = {
    "synth": {},
    "dvlog": {"window_seconds": 9.0, "heads": 8,
              "gate_modality": "face_embedding", "presence_threshold": 0.5},
    "daicwoz": {"window_seconds": 6.0, "heads": 4},
    "edaic": {"window_seconds": 6.0, "heads": 4},
}

_GEN_KINDS = {
    "train_records": "int", "val_records": "int", "test_records": "int",
    "min_duration": "float", "max_duration": "float", "cue_modality": "str",
    "cue_magnitude": "float", "cue_fraction": "float", "noise_scale": "float",
    "dropout_rate": "float", "burst_frames": "int", "seed": "int",
}
_TRAIN_KINDS = {
    "window_seconds": "float", "d": "int", "layers": "int", "heads": "int",
    "dropout": "float", "base_lr": "float", "epochs": "int",
    "batch_size": "int", "weight_decay": "float", "beta1": "float",
    "beta2": "float", "adam_eps": "float", "seed": "int",
    "presence_threshold": "float", "gate_modality": "optstr",
    "class_weighting": "bool",
}
_EVAL_KINDS = {
    "window_seconds": "float", "presence_threshold": "float",
    "gate_modality": "optstr", "n_prime": "int",
}

_TRUE_WORDS = ("true", "yes", "on", "1")
_FALSE_WORDS = ("false", "no", "off", "0")


@dataclass
class Config:
    """Resolved configuration: dataset schema plus train and eval settings."""

    preset: str
    descriptors: list[ModalityDescriptor]
    synth: SynthSpec
    train: TrainConfig
    eval_window_seconds: float
    eval_presence_threshold: float
    eval_gate_modality: str | None
    n_prime: int | None


def _convert(raw: str, kind: str, key: str, lineno: int):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in _TRUE_WORDS:
                return True
            if lowered in _FALSE_WORDS:
                return False
            raise ValueError(raw)
        if kind == "optstr":
            return None if raw.lower() in ("none", "") else raw
        return raw
    except ValueError:
        article = "an" if kind == "int" else "a"
        raise ParseError(f"{key} expects {article} {kind} value, got {raw!r}",
                         line_number=lineno) from None


def _convert_override(raw: str):
    # preset override fields are dimensions and rates; the preset itself
    # rejects unknown names
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def load_config(path) -> Config:
    """Parse a key=value config file and build validated settings."""
    values: dict[str, str] = {}
    line_of: dict[str, int] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}",
                             line_number=lineno)
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key in values:
            raise ParseError(f"duplicate key {key!r} (first set on line "
                             f"{line_of[key]})", line_number=lineno)
        values[key] = raw
        line_of[key] = lineno

    preset = values.pop("data.preset", "synth")
    if preset not in _PRESETS:
        raise ConfigurationError(
            f"unknown preset {preset!r}; choose from {_PRESETS}")

    overrides: dict = {}
    gen_kwargs: dict = {}
    train_kwargs: dict = dict(_PRESET_TRAIN_DEFAULTS[preset])
    eval_kwargs: dict = {}
    for key, raw in values.items():
        lineno = line_of[key]
        section, _, field = key.partition(".")
        if not field:
            raise ConfigurationError(f"unknown key {key!r} (keys are dotted, "
                                     f"like train.epochs)")
        if section == "data":
            overrides[field] = _convert_override(raw)
        elif section == "gen":
            if field not in _GEN_KINDS:
                raise ConfigurationError(f"unknown key {key!r}")
            gen_kwargs[field] = _convert(raw, _GEN_KINDS[field], key, lineno)
        elif section == "train":
            if field not in _TRAIN_KINDS:
                raise ConfigurationError(f"unknown key {key!r}")
            train_kwargs[field] = _convert(raw, _TRAIN_KINDS[field], key, lineno)
        elif section == "eval":
            if field not in _EVAL_KINDS:
                raise ConfigurationError(f"unknown key {key!r}")
            eval_kwargs[field] = _convert(raw, _EVAL_KINDS[field], key, lineno)
        else:
            raise ConfigurationError(f"unknown key {key!r}")

    descriptors = preset_config(preset, **overrides)
    synth = SynthSpec(**gen_kwargs)
    train_config = TrainConfig(**train_kwargs)
    n_prime = eval_kwargs.pop("n_prime", None)
    if n_prime is not None and n_prime < 1:
        raise ConfigurationError(f"eval.n_prime must be >= 1, got {n_prime}")
    eval_window = eval_kwargs.pop("window_seconds", train_config.window_seconds)
    if eval_window <= 0.0:
        raise ConfigurationError("eval.window_seconds must be > 0")
    eval_threshold = eval_kwargs.pop("presence_threshold",
                                     train_config.presence_threshold)
    eval_gate = eval_kwargs.pop("gate_modality", train_config.gate_modality)
    return Config(preset=preset, descriptors=descriptors, synth=synth,
                  train=train_config, eval_window_seconds=eval_window,
                  eval_presence_threshold=eval_threshold,
                  eval_gate_modality=eval_gate, n_prime=n_prime)


# -- subcommands --------------------------------------------------------------


def _cmd_gen(args) -> int:
    config = load_config(args.config)
    manifest_path = generate_dataset(config.synth, args.out)
    spec = config.synth
    total = spec.train_records + spec.val_records + spec.test_records
    print(f"wrote {total} records ({spec.train_records} train, "
          f"{spec.val_records} val, {spec.test_records} test) to "
          f"{manifest_path}")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config)
    manifest = load_manifest(args.manifest, config.descriptors)
    result = train(manifest, config.train, args.out, resume_from=args.resume)
    for row in result.history:
        print(f"epoch {row.epoch}/{config.train.epochs} "
              f"loss {row.train_loss:.4f} val_f1 {row.val_f1:.4f}")
    print(f"best epoch {result.best_epoch} val_f1 {result.best_val_f1:.4f}")
    print(f"checkpoints: {result.best_path} {result.final_path}")
    return 0


def _checkpoint_paths(template: str, runs: int | None) -> list[Path]:
    if runs is None:
        return [Path(template)]
    if runs < 2:
        raise ConfigurationError(f"--runs must be >= 2, got {runs}")
    if "{seed}" not in template:
        raise ConfigurationError(
            "--runs needs a {seed} placeholder in --checkpoint, like "
            "runs/seed{seed}/best.mmck")
    return [Path(template.replace("{seed}", str(seed)))
            for seed in range(runs)]


def _cmd_eval(args) -> int:
    config = load_config(args.config)
    n_prime = args.n_prime if args.n_prime is not None else config.n_prime
    manifest = load_manifest(args.manifest, config.descriptors)
    meta = manifest.by_split(args.split)
    if not meta:
        raise DatasetError(f"manifest has no {args.split!r} records")
    records = [manifest.load_record(m) for m in meta]
    paths = _checkpoint_paths(args.checkpoint, args.runs)
    for path in paths:
        if not path.exists():
            raise DatasetError(f"checkpoint not found: {path}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_run_vote = []
    per_run_prefix = []
    for index, path in enumerate(paths):
        model = config.train.build_model(config.descriptors)
        restore_model(model, load_checkpoint(path))
        results = [predict_record(record, model, config.eval_window_seconds,
                                  config.eval_presence_threshold,
                                  config.eval_gate_modality)
                   for record in records]
        suffix = f"_run{index}" if len(paths) > 1 else ""
        write_predictions(out_dir / f"predictions{suffix}.tsv", results)
        write_window_predictions(out_dir / f"windows{suffix}.tsv", results)
        trues = [r.true_label for r in results]
        per_run_vote.append(
            compute_metrics([r.final_label for r in results], trues))
        if n_prime is not None:
            labels = [prefix_decision(r, min(n_prime,
                                             len(r.window_predictions)))
                      for r in results]
            per_run_prefix.append(compute_metrics(labels, trues))

    rows: dict[str, tuple[float, float]] = {}
    if len(per_run_vote) == 1:
        rows.update({k: (v, 0.0) for k, v in per_run_vote[0].as_dict().items()})
        if per_run_prefix:
            rows.update({f"prefix{n_prime}_{k}": (v, 0.0)
                         for k, v in per_run_prefix[0].as_dict().items()})
    else:
        rows.update(aggregate_runs(per_run_vote))
        if per_run_prefix:
            rows.update({f"prefix{n_prime}_{k}": v
                         for k, v in aggregate_runs(per_run_prefix).items()})
    write_metrics(out_dir / "metrics.tsv", rows)
    for name, (mean, std) in rows.items():
        print(f"{name} {mean:.4f} +- {std:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = grad_check(tolerance=args.tolerance,
                        samples_per_parameter=args.samples, seed=args.seed)
    print(report.summary())
    return 0 if report.passed else 1


def _cmd_inspect(args) -> int:
    header = read_stream_header(args.stream)
    print(f"magic: {header['magic']}")
    print(f"version: {header['version']}")
    print(f"rate_hz: {header['rate']:g}")
    print(f"frames: {header['frames']}")
    print(f"dim: {header['dim']}")
    print(f"duration_s: {header['duration_seconds']:g}")
    print(f"presence_ratio: {header['presence_ratio']:.4f}")
    return 0


# -- argument plumbing ---------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmfuse",
        description="multi-modal window-voting classifier pipeline")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric library threads "
                             "(default: MMFUSE_THREADS or machine parallelism)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen)

    tr = sub.add_parser("train", help="train on a manifest")
    tr.add_argument("--config", required=True)
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume", default=None,
                    help="continue from a final checkpoint")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="window-vote a split against a checkpoint")
    ev.add_argument("--config", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--checkpoint", required=True,
                    help="checkpoint path; with --runs, a template with a "
                         "{seed} placeholder")
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", default="test",
                    choices=("train", "val", "test"))
    ev.add_argument("--n-prime", type=int, default=None,
                    help="also score decisions after the first K windows")
    ev.add_argument("--runs", type=int, default=None,
                    help="aggregate checkpoints for seeds 0..R-1")
    ev.set_defaults(func=_cmd_eval)

    gc = sub.add_parser("gradcheck",
                        help="finite-difference check of the backward pass")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--samples", type=int, default=5,
                    help="entries sampled per parameter tensor")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=_cmd_gradcheck)

    ins = sub.add_parser("inspect", help="print a stream file's header")
    ins.add_argument("stream")
    ins.set_defaults(func=_cmd_inspect)
    return parser


def _thread_limit(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MMFUSE_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigurationError(
                f"MMFUSE_THREADS must be an integer, got {env!r}") from None
    return None


def run_command(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        code = exc.code
        return int(code) if code is not None else 0
    try:
        limit = _thread_limit(args)
        if limit is not None:
            from threadpoolctl import threadpool_limits
            context = threadpool_limits(limits=limit)
        else:
            context = contextlib.nullcontext()
        with context:
            return args.func(args)
    except MmfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        name = exc.filename if exc.filename else exc
        print(f"error: missing file: {name}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
