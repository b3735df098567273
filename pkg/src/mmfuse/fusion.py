"""Early fusion of modality embeddings and the masked transformer classifier.

Per window, each modality is encoded to the shared dimension, augmented with
its condition and fractional position rows, and the blocks are concatenated
into one sequence with a concatenated presence mask. A stack of presence-
masked self-attention layers processes the sequence; the final states are
mean-pooled over present rows only and projected to two logits.

``WindowClassifier`` owns all learnable state and is the unit the trainer,
the evaluator, and the checkpoint format operate on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, concat, masked_attention_raw
from .datamodel import ModalityDescriptor
from .encoders import Embeddings, EncoderParams, encode, init_encoder
from .errors import (
    ContractError,
    EmptyWindowError,
    NumericError,
    ValidationError,
)
from .layers import (
    encoder_stack_forward,
    init_encoder_stack,
    init_linear,
    iter_params,
    linear,
    zero_grads,
)
from .positioning import (
    ConditionTable,
    apply_conditions,
    build_sinusoidal_table,
    fractional_indices,
    init_condition_table,
)
from .windowing import Window, frames_in_window

__all__ = [
    "FusedSequence",
    "Prediction",
    "WindowClassifier",
    "concat_modalities",
    "masked_attention",
    "transformer_forward",
    "classification_loss",
    "compute_gradients",
]


@dataclass
class FusedSequence:
    """Concatenated augmented embeddings with row-level bookkeeping."""

    values: Tensor  # T x d
    mask: np.ndarray  # T
    modality_of: np.ndarray  # T, modality index per row
    position_of: np.ndarray  # T, position-table index per row


@dataclass
class Prediction:
    logits: np.ndarray  # 2
    probabilities: np.ndarray  # 2, softmax of logits
    label: int
    window_start: float


def concat_modalities(augmented: dict[str, Embeddings], order: Sequence[str],
                      modality_index: dict[str, int] | None = None,
                      position_indices: dict[str, np.ndarray] | None = None,
                      ) -> FusedSequence:
    """Concatenate per-modality blocks (values and masks) in ``order``."""
    if sorted(order) != sorted(augmented):
        raise ContractError(
            f"order {list(order)} must name each modality exactly once "
            f"(have {sorted(augmented)})")
    if modality_index is None:
        modality_index = {name: i for i, name in enumerate(sorted(augmented))}
    values, masks, mod_rows, pos_rows = [], [], [], []
    for name in order:
        part = augmented[name]
        t = part.values.shape[0]
        values.append(part.values)
        masks.append(np.asarray(part.presence, dtype=np.uint8))
        mod_rows.append(np.full(t, modality_index[name], dtype=np.int64))
        if position_indices is not None:
            pos_rows.append(np.asarray(position_indices[name], dtype=np.int64))
        else:
            pos_rows.append(np.arange(t, dtype=np.int64))
    return FusedSequence(concat(values, axis=0), np.concatenate(masks),
                         np.concatenate(mod_rows), np.concatenate(pos_rows))


def masked_attention(queries, keys, values, key_mask) -> Tensor:
    """Single-head scaled dot-product attention with key masking.

    Masked keys get zero weight exactly; a query row whose keys are all
    masked yields a zero output row.
    """
    q = queries if isinstance(queries, Tensor) else Tensor(queries)
    k = keys if isinstance(keys, Tensor) else Tensor(keys)
    v = values if isinstance(values, Tensor) else Tensor(values)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ContractError(
            f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if np.asarray(key_mask).shape[-1] != k.shape[-2]:
        raise ContractError("key mask length must match the number of keys")
    return masked_attention_raw(q, k, v, np.asarray(key_mask))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def transformer_forward(fused: FusedSequence, params: dict, heads: int,
                        mode: str = "infer", dropout: float = 0.0,
                        rng: np.random.Generator | None = None,
                        window_start: float = 0.0) -> tuple[Prediction, Tensor]:
    """Run the fused-sequence encoder stack, pool present rows, project to logits.

    Returns the prediction together with the logits tensor so a loss can be
    attached to the live graph.
    """
    n_present = int(fused.mask.sum())
    if n_present == 0:
        raise EmptyWindowError("window has no present frame in any modality")
    values = fused.values
    if n_present < fused.mask.shape[0]:
        # absent rows are excluded from attention and pooling anyway, so
        # dropping them up front shrinks the quadratic attention work
        values = values.take_rows(np.flatnonzero(fused.mask))
    mask = np.ones(n_present, dtype=np.uint8)
    x = encoder_stack_forward(values, params["stack"], mask, heads,
                              dropout, rng, mode == "train")
    pooled = x.sum(axis=0) * (1.0 / n_present)
    logits = linear(pooled, params["head"])
    z = logits.data.astype(np.float64)
    if not np.isfinite(z).all():
        raise NumericError(f"non-finite logits {z}")
    probs = _softmax(z)
    return Prediction(z, probs, int(np.argmax(z)), window_start), logits


def classification_loss(logits: Tensor, label: int) -> Tensor:
    """Two-class cross entropy of softmax(logits) against the label."""
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label}")
    if not np.isfinite(logits.data).all():
        raise NumericError(f"non-finite logits {logits.data}")
    shift = float(logits.data.max())  # constant; cancels in the softmax
    return (logits - shift).exp().sum().log() + shift - logits[label]


class WindowClassifier:
    """The full model: per-modality encoders, condition table, fused encoder."""

    def __init__(self, descriptors: Sequence[ModalityDescriptor], d: int = 256,
                 layers: int = 8, heads: int = 8, window_seconds: float = 9.0,
                 dropout: float = 0.1, seed: int = 0, dtype=np.float32):
        if d % heads != 0:
            raise ValidationError(f"model dim {d} must be divisible by {heads} heads")
        self.descriptors = list(descriptors)
        self.d = d
        self.layers = layers
        self.heads = heads
        self.window_seconds = float(window_seconds)
        self.dropout = float(dropout)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        names = tuple(desc.name for desc in self.descriptors)
        if len(set(names)) != len(names):
            raise ValidationError("duplicate modality names in configuration")
        rng = np.random.default_rng(seed)
        self.encoders: dict[str, EncoderParams] = {
            desc.name: init_encoder(desc, d, rng, dtype=self.dtype)
            for desc in self.descriptors}
        self.conditions: ConditionTable = init_condition_table(
            names, d, rng, dtype=self.dtype)
        self.fusion: dict = {
            "stack": init_encoder_stack(rng, d, heads, layers, self.dtype),
            "head": init_linear(rng, d, 2, self.dtype),
        }

    # -- parameter plumbing ------------------------------------------------

    def param_tree(self) -> dict:
        return {
            "encoders": {name: enc.learnable
                         for name, enc in self.encoders.items()},
            "conditions": self.conditions.rows,
            "fusion": self.fusion,
        }

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(iter_params(self.param_tree()))

    def zero_grads(self) -> None:
        zero_grads(self.param_tree())

    def config_dict(self) -> dict:
        return {
            "d": self.d, "layers": self.layers, "heads": self.heads,
            "window_seconds": self.window_seconds, "dropout": self.dropout,
            "modalities": [(desc.name, desc.rate, desc.raw_dim,
                            desc.encoder_kind, desc.token_count,
                            desc.token_dim, desc.state_count, desc.side)
                           for desc in self.descriptors],
        }

    # -- forward -------------------------------------------------------------

    def max_table_length(self) -> int:
        return max(frames_in_window(desc.rate, self.window_seconds)
                   for desc in self.descriptors)

    def fuse_window(self, window: Window, mode: str = "infer",
                    rng: np.random.Generator | None = None) -> FusedSequence:
        """Encode, augment, and concatenate all modality slices of a window."""
        max_t = self.max_table_length()
        table = build_sinusoidal_table(max_t, self.d)
        augmented: dict[str, Embeddings] = {}
        mod_index: dict[str, int] = {}
        pos_index: dict[str, np.ndarray] = {}
        for desc in self.descriptors:
            if desc.name not in window.slices:
                raise ContractError(f"window lacks modality {desc.name!r}")
            sl = window.slices[desc.name]
            frames = sl.frames.astype(self.dtype, copy=False)
            presence = sl.presence
            if presence.sum() == 0:
                # nothing observed: zero embeddings, no normalization stats
                emb = Embeddings(
                    Tensor(np.zeros((frames.shape[0], self.d), dtype=self.dtype)),
                    presence)
            else:
                emb = encode(frames, self.encoders[desc.name], mode, presence,
                             side=desc.side, dropout=self.dropout, rng=rng)
            index = self.conditions.index_of(desc.name)
            augmented[desc.name] = apply_conditions(emb, index, self.conditions,
                                                    table, max_t=max_t)
            mod_index[desc.name] = index
            pos_index[desc.name] = fractional_indices(max_t, frames.shape[0])
        order = [desc.name for desc in self.descriptors]
        return concat_modalities(augmented, order, mod_index, pos_index)

    def forward_window(self, window: Window, mode: str = "infer",
                       rng: np.random.Generator | None = None,
                       ) -> tuple[Prediction, Tensor]:
        fused = self.fuse_window(window, mode, rng)
        return transformer_forward(fused, self.fusion, self.heads, mode,
                                   self.dropout, rng,
                                   window_start=window.start_seconds)

    def predict_window(self, window: Window) -> Prediction:
        pred, _ = self.forward_window(window, mode="infer")
        return pred


def compute_gradients(model: WindowClassifier, windows: Sequence[Window],
                      mode: str = "train",
                      rng: np.random.Generator | None = None,
                      weights: Sequence[float] | None = None,
                      ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over a window batch and its parameter gradients.

    Each window is pushed forward and backward individually (scaled by 1/B),
    so peak memory stays at one window's graph; gradients accumulate across
    the batch. Losses are averaged in float64. Optional per-window weights
    rescale each window's contribution to the mean.
    """
    if not windows:
        raise ContractError("empty window batch")
    if weights is not None and len(weights) != len(windows):
        raise ContractError(f"{len(weights)} weights for {len(windows)} windows")
    model.zero_grads()
    scale = 1.0 / len(windows)
    total = 0.0
    for i, window in enumerate(windows):
        w = 1.0 if weights is None else float(weights[i])
        _, logits = model.forward_window(window, mode=mode, rng=rng)
        loss = classification_loss(logits, window.label)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss on record {window.record_id!r}")
        total += float(loss.data) * w
        (loss * (scale * w)).backward()
    grads = {name: (tensor.grad if tensor.grad is not None
                    else np.zeros_like(tensor.data))
             for name, tensor in model.named_parameters()}
    return total * scale, grads
