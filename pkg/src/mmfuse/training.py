"""Window-sampled training: AdamW, per-step cosine decay, checkpoints.

Each epoch draws one random window per training recording, seeded by
(seed, epoch, record id) so an interrupted run resumes on the identical
trajectory, then applies decoupled-weight-decay Adam with a cosine
learning-rate schedule evaluated at every optimizer step. Validation after
each epoch scores majority-vote F1; the best and final states are written
as binary checkpoints next to a tab-separated history file.

The gradient checker drives the same forward pass a training step uses,
in float64 on a toy configuration, and compares every sampled parameter
against a central finite difference.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import DatasetManifest, ModalityDescriptor, ModalityStream, VideoRecord
from .errors import (
    ConfigurationError,
    ContractError,
    CorruptionError,
    DatasetError,
    FormatError,
    NumericError,
    SchemaError,
)
from .evaluation import compute_metrics, predict_record
from .fusion import WindowClassifier, classification_loss, compute_gradients
from .positioning import build_sinusoidal_table
from .windowing import extract_window, sample_training_window, window_rng

__all__ = [
    "TrainConfig",
    "TrainResult",
    "HistoryRow",
    "OptimizerState",
    "GradCheckReport",
    "cosine_lr",
    "init_optimizer",
    "adamw_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "restore_model",
    "restore_optimizer",
    "config_fingerprint",
    "write_history",
    "read_history",
    "compare_gradients",
    "grad_check",
]

CHECKPOINT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1
_CK_HEADER = struct.Struct("<4sI32sI")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")
_U64 = struct.Struct("<Q")


@dataclass
class TrainConfig:
    """Everything a training run depends on besides the dataset itself."""

    window_seconds: float = 9.0
    d: int = 256
    layers: int = 8
    heads: int = 8
    dropout: float = 0.1
    base_lr: float = 0.001
    epochs: int = 200
    batch_size: int = 8
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    presence_threshold: float = 0.5
    gate_modality: str | None = None
    class_weighting: bool = False

    def __post_init__(self):
        if self.d < 1 or self.heads < 1 or self.d % self.heads != 0:
            raise ConfigurationError(
                f"model dim {self.d} is not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ConfigurationError(f"layers must be >= 1, got {self.layers}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0.0 or self.window_seconds <= 0.0:
            raise ConfigurationError("base_lr and window_seconds must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout {self.dropout} outside [0, 1)")
        if self.weight_decay < 0.0:
            raise ConfigurationError("weight_decay must be >= 0")
        if not 0.0 <= self.presence_threshold <= 1.0:
            raise ConfigurationError(
                f"presence_threshold {self.presence_threshold} outside [0, 1]")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def build_model(self, descriptors) -> WindowClassifier:
        return WindowClassifier(descriptors, d=self.d, layers=self.layers,
                                heads=self.heads,
                                window_seconds=self.window_seconds,
                                dropout=self.dropout, seed=self.seed)


@dataclass
class HistoryRow:
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_f1: float


@dataclass
class TrainResult:
    best_path: Path
    final_path: Path
    history_path: Path
    history: list[HistoryRow]
    best_epoch: int
    best_val_f1: float
    model: WindowClassifier


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay without warmup: base_lr at step 0, zero at total_steps."""
    if total_steps <= 0:
        raise ConfigurationError(f"total_steps must be > 0, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# -- optimizer -----------------------------------------------------------------


@dataclass
class OptimizerState:
    """First and second Adam moments plus the global step counter."""

    moment1: dict[str, np.ndarray]
    moment2: dict[str, np.ndarray]
    step: int = 0


def init_optimizer(named_params) -> OptimizerState:
    return OptimizerState(
        {name: np.zeros_like(t.data) for name, t in named_params},
        {name: np.zeros_like(t.data) for name, t in named_params},
        0)


def adamw_step(named_params, grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, *,
               weight_decay: float = 0.01, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update with decoupled weight decay.

    Decay multiplies each parameter by (1 - lr * weight_decay) before the
    moment-based update is subtracted; the gradient itself never sees the
    decay term.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, param in named_params:
        g = grads.get(name)
        if g is None:
            raise ContractError(f"no gradient supplied for {name!r}")
        if g.shape != param.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} != parameter shape "
                f"{param.data.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
        m = state.moment1[name]
        v = state.moment2[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        data = param.data
        data *= 1.0 - lr * weight_decay
        data -= lr * update


# -- checkpoints ---------------------------------------------------------------


def config_fingerprint(config: dict) -> bytes:
    """SHA-256 over the canonical JSON form of a model configuration."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).digest()


@dataclass
class Checkpoint:
    fingerprint: bytes
    blobs: dict[str, np.ndarray]  # name -> float32 array

    def scalar(self, name: str) -> float:
        if name not in self.blobs:
            raise SchemaError(f"checkpoint lacks blob {name!r}")
        return float(self.blobs[name].reshape(-1)[0])


def _model_blobs(model: WindowClassifier) -> dict[str, np.ndarray]:
    blobs: dict[str, np.ndarray] = {}
    for name, tensor in model.named_parameters():
        blobs["param." + name] = tensor.data.astype(np.float32, copy=False)
    for name, enc in model.encoders.items():
        if enc.running_mean is not None:
            blobs[f"norm.{name}.mean"] = enc.running_mean.astype(
                np.float32, copy=False)
            blobs[f"norm.{name}.var"] = enc.running_var.astype(
                np.float32, copy=False)
            blobs[f"norm.{name}.updates"] = np.array([enc.updates],
                                                     dtype=np.float32)
    return blobs


def save_checkpoint(path, model: WindowClassifier,
                    optimizer: OptimizerState | None = None, *,
                    epoch: int = 0, best_f1: float = 0.0,
                    best_epoch: int = 0) -> None:
    """Write model weights, normalization state, and optimizer moments.

    Every payload is a named, length-prefixed float32 blob; the header
    carries a fingerprint of the architecture so a checkpoint can never be
    loaded into a differently shaped model.
    """
    blobs = _model_blobs(model)
    if optimizer is not None:
        for key, m in optimizer.moment1.items():
            blobs["opt.m." + key] = m.astype(np.float32, copy=False)
        for key, v in optimizer.moment2.items():
            blobs["opt.v." + key] = v.astype(np.float32, copy=False)
        blobs["meta.opt_step"] = np.array([optimizer.step], dtype=np.float32)
    blobs["meta.epoch"] = np.array([epoch], dtype=np.float32)
    blobs["meta.best_f1"] = np.array([best_f1], dtype=np.float32)
    blobs["meta.best_epoch"] = np.array([best_epoch], dtype=np.float32)

    fingerprint = config_fingerprint(model.config_dict())
    payload = bytearray(_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                                        fingerprint, len(blobs)))
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype=np.float32)
        encoded = name.encode("utf-8")
        payload += _U16.pack(len(encoded))
        payload += encoded
        payload += _U8.pack(arr.ndim)
        for dim in arr.shape:
            payload += _U64.pack(dim)
        payload += arr.tobytes()
    Path(path).write_bytes(bytes(payload))


def _take(raw: bytes, offset: int, count: int) -> tuple[bytes, int]:
    if offset + count > len(raw):
        raise CorruptionError(
            f"checkpoint truncated: needed {offset + count} bytes, "
            f"file has {len(raw)}")
    return raw[offset:offset + count], offset + count


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CK_HEADER.size:
        raise CorruptionError(
            f"checkpoint truncated: {len(raw)} bytes is shorter than the header")
    magic, version, fingerprint, n_blobs = _CK_HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    offset = _CK_HEADER.size
    blobs: dict[str, np.ndarray] = {}
    for _ in range(n_blobs):
        chunk, offset = _take(raw, offset, _U16.size)
        (name_len,) = _U16.unpack(chunk)
        chunk, offset = _take(raw, offset, name_len)
        name = chunk.decode("utf-8")
        chunk, offset = _take(raw, offset, _U8.size)
        (ndim,) = _U8.unpack(chunk)
        shape = []
        for _ in range(ndim):
            chunk, offset = _take(raw, offset, _U64.size)
            shape.append(_U64.unpack(chunk)[0])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        chunk, offset = _take(raw, offset, count * 4)
        blobs[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    if offset != len(raw):
        raise CorruptionError(
            f"{len(raw) - offset} trailing bytes after the last blob")
    return Checkpoint(fingerprint, blobs)


def restore_model(model: WindowClassifier, checkpoint: Checkpoint) -> None:
    """Load weights and normalization state; the architecture must match."""
    expected = config_fingerprint(model.config_dict())
    if checkpoint.fingerprint != expected:
        raise SchemaError(
            "checkpoint fingerprint does not match the model configuration")
    for name, tensor in model.named_parameters():
        key = "param." + name
        if key not in checkpoint.blobs:
            raise SchemaError(f"checkpoint lacks parameter {name!r}")
        blob = checkpoint.blobs[key]
        if blob.shape != tensor.data.shape:
            raise SchemaError(
                f"{name!r}: checkpoint shape {blob.shape} != {tensor.data.shape}")
        tensor.data[...] = blob.astype(model.dtype, copy=False)
    for name, enc in model.encoders.items():
        if enc.running_mean is None:
            continue
        for stat, target in (("mean", enc.running_mean), ("var", enc.running_var)):
            key = f"norm.{name}.{stat}"
            if key not in checkpoint.blobs:
                raise SchemaError(f"checkpoint lacks normalization blob {key!r}")
            target[...] = checkpoint.blobs[key].astype(model.dtype, copy=False)
        enc.updates = int(round(checkpoint.scalar(f"norm.{name}.updates")))


def restore_optimizer(state: OptimizerState, checkpoint: Checkpoint) -> None:
    for kind, moments in (("m", state.moment1), ("v", state.moment2)):
        for name, arr in moments.items():
            key = f"opt.{kind}.{name}"
            if key not in checkpoint.blobs:
                raise SchemaError(f"checkpoint lacks optimizer blob {key!r}")
            arr[...] = checkpoint.blobs[key].astype(arr.dtype, copy=False)
    state.step = int(round(checkpoint.scalar("meta.opt_step")))


# -- history file --------------------------------------------------------------


def write_history(path, rows: list[HistoryRow]) -> None:
    lines = [f"{r.epoch}\t{r.step}\t{r.lr:.17g}\t{r.train_loss:.17g}"
             f"\t{r.val_f1:.17g}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_history(path) -> list[HistoryRow]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        epoch, step, lr, loss, f1 = line.split("\t")
        rows.append(HistoryRow(int(epoch), int(step), float(lr), float(loss),
                               float(f1)))
    return rows


# -- training loop -------------------------------------------------------------


def _usable_training_records(manifest: DatasetManifest,
                             config: TrainConfig) -> list[VideoRecord]:
    usable = []
    for meta in manifest.by_split("train"):
        record = manifest.load_record(meta)
        if record.span_seconds < config.window_seconds:
            warnings.warn(
                f"skipping training record {record.id!r}: span "
                f"{record.span_seconds:.2f}s is shorter than one "
                f"{config.window_seconds}s window")
            continue
        usable.append(record)
    if not usable:
        raise DatasetError(
            "every training record is shorter than one window")
    return usable


def _class_weights(records: list[VideoRecord]) -> dict[int, float]:
    counts = {0: 0, 1: 0}
    for r in records:
        counts[r.label] += 1
    if counts[0] == 0 or counts[1] == 0:
        raise DatasetError("class weighting needs both labels in the train split")
    total = len(records)
    return {label: total / (2.0 * n) for label, n in counts.items()}


def _validation_f1(model: WindowClassifier, records: list[VideoRecord],
                   config: TrainConfig) -> float:
    results = [predict_record(r, model, config.window_seconds,
                              config.presence_threshold, config.gate_modality)
               for r in records]
    metrics = compute_metrics([r.final_label for r in results],
                              [r.true_label for r in results])
    return metrics.f1


def train(manifest: DatasetManifest, config: TrainConfig, out_dir,
          resume_from=None, stop_after_epoch: int | None = None) -> TrainResult:
    """Run the full window-sampled training loop over a manifest.

    Only the train and val splits are ever read; test-split files are never
    opened. Writes ``best.mmck`` (highest validation vote-F1 so far, with
    optimizer state), ``final.mmck``, and ``history.tsv`` into ``out_dir``.
    Passing a final checkpoint as ``resume_from`` continues the exact
    trajectory the uninterrupted run would have taken; ``stop_after_epoch``
    halts early (the learning-rate schedule still spans ``config.epochs``),
    which is how an interruption is simulated and recovered from.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.mmck"
    final_path = out_dir / "final.mmck"
    history_path = out_dir / "history.tsv"

    train_records = _usable_training_records(manifest, config)
    val_meta = manifest.by_split("val")
    if not val_meta:
        raise DatasetError("manifest has no val records to select a model on")
    val_records = [manifest.load_record(m) for m in val_meta]

    model = config.build_model(manifest.modality_config)
    named = model.named_parameters()
    optimizer = init_optimizer(named)
    steps_per_epoch = math.ceil(len(train_records) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    start_epoch = 1
    best_f1 = -1.0
    best_epoch = 0
    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from)
        restore_model(model, checkpoint)
        restore_optimizer(optimizer, checkpoint)
        start_epoch = int(round(checkpoint.scalar("meta.epoch"))) + 1
        best_f1 = checkpoint.scalar("meta.best_f1")
        best_epoch = int(round(checkpoint.scalar("meta.best_epoch")))

    weights_by_label = (_class_weights(train_records)
                        if config.class_weighting else None)
    end_epoch = (config.epochs if stop_after_epoch is None
                 else min(stop_after_epoch, config.epochs))

    history: list[HistoryRow] = []
    for epoch in range(start_epoch, end_epoch + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(
            len(train_records))
        windows = []
        for idx in order:
            record = train_records[int(idx)]
            rng = window_rng(config.seed, epoch, record.id)
            windows.append(sample_training_window(
                record, config.window_seconds, config.presence_threshold,
                config.gate_modality, rng))

        epoch_loss = 0.0
        last_lr = 0.0
        for first in range(0, len(windows), config.batch_size):
            batch = windows[first:first + config.batch_size]
            lr = cosine_lr(optimizer.step, total_steps, config.base_lr)
            drop_rng = np.random.default_rng([config.seed, epoch, first, 977])
            weights = ([weights_by_label[w.label] for w in batch]
                       if weights_by_label else None)
            loss, grads = compute_gradients(model, batch, mode="train",
                                            rng=drop_rng, weights=weights)
            adamw_step(named, grads, optimizer, lr,
                       weight_decay=config.weight_decay, beta1=config.beta1,
                       beta2=config.beta2, eps=config.adam_eps)
            epoch_loss += loss * len(batch)
            last_lr = lr

        train_loss = epoch_loss / len(windows)
        val_f1 = _validation_f1(model, val_records, config)
        history.append(HistoryRow(epoch, optimizer.step, last_lr, train_loss,
                                  val_f1))
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            save_checkpoint(best_path, model, optimizer, epoch=epoch,
                            best_f1=best_f1, best_epoch=best_epoch)

    save_checkpoint(final_path, model, optimizer, epoch=end_epoch,
                    best_f1=best_f1, best_epoch=best_epoch)
    write_history(history_path, history)
    return TrainResult(best_path, final_path, history_path, history,
                       best_epoch, float(best_f1), model)


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    max_rel_error: float
    worst_parameter: str
    checked: int
    group_errors: dict[str, float] = field(default_factory=dict)
    position_analytic: float = 0.0
    position_numeric: float = 0.0
    elapsed_seconds: float = 0.0

    def summary(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return (f"{state}: {self.checked} sampled parameters, max relative "
                f"error {self.max_rel_error:.3e} (tolerance {self.tolerance:g}, "
                f"worst {self.worst_parameter}), position table "
                f"{self.position_analytic:g}/{self.position_numeric:g}, "
                f"{self.elapsed_seconds:.1f}s")


def compare_gradients(analytic: float, numeric: float) -> float:
    """Error with a unit floor: absolute below magnitude 1, relative above."""
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def _toy_descriptors() -> list[ModalityDescriptor]:
    return [
        ModalityDescriptor(name="mic", rate=8.0, raw_dim=5,
                           encoder_kind="projection"),
        ModalityDescriptor(name="marks", rate=4.0, raw_dim=6,
                           encoder_kind="landmark_set", token_count=2,
                           token_dim=3),
        ModalityDescriptor(name="hand", rate=4.0, raw_dim=6,
                           encoder_kind="landmark_set", token_count=2,
                           token_dim=3, side="left"),
        ModalityDescriptor(name="blink", rate=6.0, raw_dim=1,
                           encoder_kind="state", state_count=2),
    ]


def _toy_record(descriptors, rng: np.random.Generator,
                duration: float = 3.0) -> VideoRecord:
    streams = {}
    for desc in descriptors:
        t = int(np.floor(desc.rate * duration + 1e-9)) + 1
        presence = (rng.random(t) < 0.85).astype(np.uint8)
        presence[0] = 1  # at least one observed frame per modality
        if desc.encoder_kind == "state":
            frames = rng.integers(0, desc.state_count, size=(t, 1))
            frames = frames.astype(np.float32)
        else:
            frames = rng.standard_normal((t, desc.raw_dim)).astype(np.float32)
        frames *= presence[:, None]
        streams[desc.name] = ModalityStream(desc, frames, presence)
    return VideoRecord("toy", 1, "train", streams)


def _norm_state(model: WindowClassifier):
    return {name: (enc.running_mean.copy(), enc.running_var.copy(), enc.updates)
            for name, enc in model.encoders.items()
            if enc.running_mean is not None}


def _restore_norm_state(model: WindowClassifier, saved) -> None:
    for name, (mean, var, updates) in saved.items():
        enc = model.encoders[name]
        enc.running_mean[...] = mean
        enc.running_var[...] = var
        enc.updates = updates


def grad_check(tolerance: float = 1e-4, epsilon: float = 1e-3,
               samples_per_parameter: int = 5, seed: int = 0,
               ) -> GradCheckReport:
    """Compare every parameter group against central finite differences.

    Runs a toy model in float64 through the same train-mode forward pass the
    optimizer sees (dropout off), samples entries from every parameter
    tensor, and reports the worst relative error. The sinusoidal position
    table is reported separately: it is not a parameter, so its analytic
    gradient is zero by construction, and perturbing an externally built
    copy of it cannot move the loss because the forward pass reconstructs
    the table from its closed form.
    """
    started = time.perf_counter()
    descriptors = _toy_descriptors()
    model = WindowClassifier(descriptors, d=8, layers=1, heads=2,
                             window_seconds=2.0, dropout=0.0, seed=seed,
                             dtype=np.float64)
    record = _toy_record(descriptors, np.random.default_rng(seed + 17))
    window = extract_window(record, 0.25, 2.0)

    saved = _norm_state(model)

    def loss_value() -> float:
        _restore_norm_state(model, saved)
        _, logits = model.forward_window(window, mode="train")
        return float(classification_loss(logits, window.label).data)

    _restore_norm_state(model, saved)
    _, grads = compute_gradients(model, [window], mode="train")

    rng = np.random.default_rng(seed + 1)
    max_err = -1.0
    worst = ""
    checked = 0
    group_errors: dict[str, float] = {}
    for name, tensor in model.named_parameters():
        flat = tensor.data.reshape(-1)
        grad = grads[name].reshape(-1)
        k = min(samples_per_parameter, flat.size)
        parts = name.split(".")
        group = ".".join(parts[:2]) if parts[0] == "encoders" else parts[0]
        for i in rng.choice(flat.size, size=k, replace=False):
            original = flat[i]
            flat[i] = original + epsilon
            plus = loss_value()
            flat[i] = original - epsilon
            minus = loss_value()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            err = compare_gradients(float(grad[i]), numeric)
            checked += 1
            group_errors[group] = max(group_errors.get(group, -1.0), err)
            if err > max_err:
                max_err, worst = err, name

    # the position table is derived state, never optimized: it must not show
    # up among the parameters, and a perturbed external copy must not move
    # the loss
    table = build_sinusoidal_table(model.max_table_length(), model.d)
    rows = table.rows.copy()
    rows.reshape(-1)[rng.choice(rows.size, size=5, replace=False)] += epsilon
    base = loss_value()
    position_numeric = abs(loss_value() - base) / (2.0 * epsilon)
    position_analytic = 0.0
    positions_are_parameters = any(
        "position" in name for name, _ in model.named_parameters())

    elapsed = time.perf_counter() - started
    passed = (max_err <= tolerance and position_numeric == 0.0
              and not positions_are_parameters)
    return GradCheckReport(passed=passed, tolerance=tolerance,
                           max_rel_error=max_err, worst_parameter=worst,
                           checked=checked, group_errors=group_errors,
                           position_analytic=position_analytic,
                           position_numeric=position_numeric,
                           elapsed_seconds=elapsed)
