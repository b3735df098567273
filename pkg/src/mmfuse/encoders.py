"""Learnable per-modality encoders mapping raw frames to the shared dimension.

Three kinds cover every modality: ``projection`` (masked batch normalization
plus a linear map), ``landmark_set`` (per-token projection with token-index
and optional hand-side embeddings, a 2-layer token transformer, and average
pooling over tokens), and ``state`` (an embedding-table lookup for discrete
streams such as blinking).

Normalization statistics are computed over PRESENT frames only, and every
encoder forces absent rows to exact zeros; presence flags pass through
untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .datamodel import ModalityDescriptor
from .errors import (
    ConfigurationError,
    DataError,
    DegenerateStatisticsError,
    SchemaError,
)
from .layers import (
    encoder_stack_forward,
    init_embedding,
    init_encoder_stack,
    init_linear,
    linear,
)

__all__ = [
    "Embeddings",
    "EncoderParams",
    "init_encoder",
    "normalize",
    "encode_projection",
    "encode_landmark_set",
    "encode_state",
    "encode",
]

NORM_MOMENTUM = 0.1
NORM_EPS = 1e-5
TOKEN_HEADS = 4
TOKEN_LAYERS = 2


@dataclass
class Embeddings:
    """Encoded frames: T_j x d values with the modality's presence flags."""

    values: Tensor
    presence: np.ndarray


@dataclass
class EncoderParams:
    """Weights and normalization state for one modality encoder."""

    kind: str
    raw_dim: int
    d: int
    learnable: dict
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    token_count: int | None = None
    token_dim: int | None = None
    state_count: int | None = None
    side: str | None = None
    updates: int = 0  # train-mode normalization updates applied so far


def init_encoder(descriptor: ModalityDescriptor, d: int,
                 rng: np.random.Generator, dtype=np.float32) -> EncoderParams:
    """Fresh encoder parameters matching a modality descriptor."""
    kind = descriptor.encoder_kind
    if kind == "projection":
        learnable = {
            "norm": _init_norm(descriptor.raw_dim, dtype),
            "proj": init_linear(rng, descriptor.raw_dim, d, dtype),
        }
    elif kind == "landmark_set":
        learnable = {
            "norm": _init_norm(descriptor.raw_dim, dtype),
            "proj": init_linear(rng, descriptor.token_dim, d, dtype),
            "token_embed": init_embedding(rng, descriptor.token_count, d, dtype),
            "stack": init_encoder_stack(rng, d, TOKEN_HEADS, TOKEN_LAYERS, dtype),
        }
        if descriptor.side is not None:
            learnable["side_embed"] = init_embedding(rng, 2, d, dtype)
    elif kind == "state":
        learnable = {"table": init_embedding(rng, descriptor.state_count, d, dtype)}
    else:
        raise ConfigurationError(f"unknown encoder kind {kind!r}")
    params = EncoderParams(kind=kind, raw_dim=descriptor.raw_dim, d=d,
                           learnable=learnable,
                           token_count=descriptor.token_count,
                           token_dim=descriptor.token_dim,
                           state_count=descriptor.state_count,
                           side=descriptor.side)
    if kind != "state":
        params.running_mean = np.zeros(descriptor.raw_dim, dtype=dtype)
        params.running_var = np.ones(descriptor.raw_dim, dtype=dtype)
    return params


def _init_norm(raw_dim: int, dtype) -> dict:
    return {"scale": Tensor(np.ones(raw_dim, dtype=dtype), requires_grad=True),
            "shift": Tensor(np.zeros(raw_dim, dtype=dtype), requires_grad=True)}


def _check_mode(mode: str) -> None:
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be train or infer, got {mode!r}")


def _mask_column(presence: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(presence, dtype=dtype)[:, None])


def normalize(frames, params: EncoderParams, mode: str,
              presence: np.ndarray) -> Tensor:
    """Masked per-channel batch normalization.

    Train mode computes mean and (population) variance over present frames
    only and folds them into the running statistics; infer mode applies the
    running statistics. Absent rows come out exactly zero.
    """
    _check_mode(mode)
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    if x.shape[1] != params.raw_dim:
        raise SchemaError(f"expected {params.raw_dim} channels, got {x.shape[1]}")
    dtype = x.data.dtype
    maskcol = _mask_column(presence, dtype)
    norm = params.learnable["norm"]
    if mode == "train":
        n_present = float(np.asarray(presence).sum())
        if n_present == 0:
            raise DegenerateStatisticsError(
                "cannot normalize a training batch with zero present frames")
        # gradients flow through the batch statistics
        mean = (x * maskcol).sum(axis=0) / n_present
        centered = x - mean
        var = (centered * centered * maskcol).sum(axis=0) / n_present
        m = NORM_MOMENTUM
        params.running_mean = ((1.0 - m) * params.running_mean
                               + m * mean.data).astype(dtype)
        params.running_var = ((1.0 - m) * params.running_var
                              + m * var.data).astype(dtype)
        params.updates += 1
    else:
        mean = Tensor(params.running_mean.astype(dtype))
        var = Tensor(params.running_var.astype(dtype))
        centered = x - mean
    scaled = centered / (var + NORM_EPS).sqrt() * norm["scale"] + norm["shift"]
    return scaled * maskcol


def encode_projection(frames, params: EncoderParams, mode: str,
                      presence: np.ndarray) -> Embeddings:
    """Batch normalization followed by a linear map to d channels."""
    if params.kind != "projection":
        raise SchemaError(f"projection encode on a {params.kind} encoder")
    normed = normalize(frames, params, mode, presence)
    values = linear(normed, params.learnable["proj"])
    return Embeddings(values * _mask_column(presence, values.data.dtype),
                      np.asarray(presence))


def encode_landmark_set(frames, params: EncoderParams, mode: str,
                        presence: np.ndarray, side: str | None = None,
                        dropout: float = 0.0,
                        rng: np.random.Generator | None = None) -> Embeddings:
    """Token transformer over a landmark grid, averaged to one vector per frame.

    Each frame's ``token_count`` landmarks are normalized, projected to d,
    tagged with learned token-index embeddings (plus a side embedding for
    paired left/right streams), mixed by the 2-layer token transformer, and
    mean-pooled over the token axis.
    """
    if params.kind != "landmark_set":
        raise SchemaError(f"landmark encode on a {params.kind} encoder")
    if side is not None and "side_embed" not in params.learnable:
        raise ConfigurationError("side given for an encoder without side embeddings")
    normed = normalize(frames, params, mode, presence)
    t = normed.shape[0]
    tokens = normed.reshape(t, params.token_count, params.token_dim)
    h = linear(tokens, params.learnable["proj"])  # (T, N, d)
    h = h + params.learnable["token_embed"]
    if side is not None:
        if side not in ("left", "right"):
            raise ConfigurationError(f"side must be left or right, got {side!r}")
        h = h + params.learnable["side_embed"][0 if side == "left" else 1]
    all_tokens = np.ones(params.token_count, dtype=np.uint8)
    h = encoder_stack_forward(h, params.learnable["stack"], all_tokens,
                              TOKEN_HEADS, dropout, rng, mode == "train")
    pooled = h.mean(axis=1)  # (T, d)
    return Embeddings(pooled * _mask_column(presence, pooled.data.dtype),
                      np.asarray(presence))


def encode_state(frames, params: EncoderParams,
                 presence: np.ndarray) -> Embeddings:
    """Embedding-table lookup for integer state streams."""
    if params.kind != "state":
        raise SchemaError(f"state encode on a {params.kind} encoder")
    data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    states = data[:, 0]
    valid = (states == np.floor(states)) & (states >= 0) & \
        (states < params.state_count)
    present = np.asarray(presence).astype(bool)
    if not valid[present].all():
        raise DataError(
            f"state values outside [0, {params.state_count}) in present frames")
    indices = np.where(present, states.astype(np.int64), 0)
    rows = params.learnable["table"].take_rows(indices)
    return Embeddings(rows * _mask_column(presence, rows.data.dtype),
                      np.asarray(presence))


def encode(frames, params: EncoderParams, mode: str, presence: np.ndarray,
           side: str | None = None, dropout: float = 0.0,
           rng: np.random.Generator | None = None) -> Embeddings:
    """Dispatch to the encoder matching ``params.kind``."""
    if params.kind == "projection":
        return encode_projection(frames, params, mode, presence)
    if params.kind == "landmark_set":
        return encode_landmark_set(frames, params, mode, presence, side,
                                   dropout, rng)
    return encode_state(frames, params, presence)
