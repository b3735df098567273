"""Shared transformer building blocks and parameter-tree helpers.

Both the per-frame token encoder (landmark sets) and the main fused-sequence
encoder use the same pre-normalization layer: multi-head masked attention and
a 4x feed-forward with Gaussian-error linear units, each wrapped in a
residual connection, followed by one final normalization after the stack.

Parameters live in nested dicts of Tensors; ``iter_params`` flattens a tree
to dotted names for the optimizer and checkpoints.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, masked_attention_raw

__all__ = [
    "init_linear",
    "linear",
    "init_layer_norm",
    "layer_norm",
    "init_embedding",
    "init_encoder_stack",
    "encoder_stack_forward",
    "apply_dropout",
    "iter_params",
    "zero_grads",
]

INIT_SCALE = 0.02
LN_EPS = 1e-5
FFN_MULT = 4


def _param(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_SCALE, size=shape).astype(dtype),
                  requires_grad=True)


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, dtype) -> dict:
    return {"w": _param(rng, (d_in, d_out), dtype),
            "b": Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)}


def linear(x: Tensor, p: dict) -> Tensor:
    if isinstance(x, Tensor) and x.data.ndim > 2:
        # one big gemm beats a batched loop of tiny ones
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1])
        return (flat @ p["w"] + p["b"]).reshape(*lead, p["w"].shape[-1])
    return x @ p["w"] + p["b"]


def init_embedding(rng: np.random.Generator, count: int, d: int, dtype) -> Tensor:
    return _param(rng, (count, d), dtype)


def init_layer_norm(d: int, dtype) -> dict:
    return {"g": Tensor(np.ones(d, dtype=dtype), requires_grad=True),
            "b": Tensor(np.zeros(d, dtype=dtype), requires_grad=True)}


def layer_norm(x: Tensor, p: dict) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + LN_EPS).sqrt() * p["g"] + p["b"]


def apply_dropout(x: Tensor, rate: float, rng: np.random.Generator | None,
                  train: bool) -> Tensor:
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * Tensor(keep)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, t, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, t, heads * dh)


def init_encoder_layer(rng: np.random.Generator, d: int, heads: int, dtype) -> dict:
    if d % heads != 0:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    return {
        "ln1": init_layer_norm(d, dtype),
        "q": init_linear(rng, d, d, dtype),
        "k": init_linear(rng, d, d, dtype),
        "v": init_linear(rng, d, d, dtype),
        "o": init_linear(rng, d, d, dtype),
        "ln2": init_layer_norm(d, dtype),
        "ff1": init_linear(rng, d, FFN_MULT * d, dtype),
        "ff2": init_linear(rng, FFN_MULT * d, d, dtype),
    }


def encoder_layer_forward(x: Tensor, p: dict, key_mask: np.ndarray, heads: int,
                          dropout: float = 0.0,
                          rng: np.random.Generator | None = None,
                          train: bool = False) -> Tensor:
    h = layer_norm(x, p["ln1"])
    attended = masked_attention_raw(_split_heads(linear(h, p["q"]), heads),
                                    _split_heads(linear(h, p["k"]), heads),
                                    _split_heads(linear(h, p["v"]), heads),
                                    key_mask)
    x = x + apply_dropout(linear(_merge_heads(attended), p["o"]), dropout, rng, train)
    h = layer_norm(x, p["ln2"])
    h = linear(linear(h, p["ff1"]).gelu(), p["ff2"])
    return x + apply_dropout(h, dropout, rng, train)


def init_encoder_stack(rng: np.random.Generator, d: int, heads: int,
                       n_layers: int, dtype) -> dict:
    return {"layers": [init_encoder_layer(rng, d, heads, dtype)
                       for _ in range(n_layers)],
            "final_ln": init_layer_norm(d, dtype)}


def encoder_stack_forward(x: Tensor, p: dict, key_mask: np.ndarray, heads: int,
                          dropout: float = 0.0,
                          rng: np.random.Generator | None = None,
                          train: bool = False) -> Tensor:
    for layer in p["layers"]:
        x = encoder_layer_forward(x, layer, key_mask, heads, dropout, rng, train)
    return layer_norm(x, p["final_ln"])


def iter_params(tree, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Flatten a nested dict/list parameter tree to (dotted name, tensor)."""
    if isinstance(tree, Tensor):
        yield prefix, tree
    elif isinstance(tree, dict):
        for key, sub in tree.items():
            yield from iter_params(sub, f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(tree, (list, tuple)):
        for i, sub in enumerate(tree):
            yield from iter_params(sub, f"{prefix}.{i}" if prefix else str(i))
    else:
        raise TypeError(f"unexpected node {type(tree).__name__} at {prefix!r}")


def zero_grads(tree) -> None:
    for _, tensor in iter_params(tree):
        tensor.grad = None
