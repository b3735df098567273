"""Sinusoidal position table, fractional multi-rate indexing, x + e + p.

Slower streams are aligned to the densest stream of a window by indexing the
shared position table at ``r * t`` with ``r = floor(max_T / T_j)``: frames of
different rates covering the same instant receive the same position row. The
table itself is a pure function of (max_T, d) and is never trained; the
per-modality condition embeddings are learned.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor
from .encoders import Embeddings
from .errors import ConfigurationError, ContractError
from .layers import init_embedding

__all__ = [
    "PositionTable",
    "ConditionTable",
    "build_sinusoidal_table",
    "fractional_index",
    "fractional_indices",
    "apply_conditions",
    "init_condition_table",
]


@dataclass(frozen=True)
class PositionTable:
    """Fixed sinusoidal rows: row p, channel 2i = sin(p / 10000^(2i/d))."""

    rows: np.ndarray  # max_T x d, float64, read-only
    max_t: int


@dataclass
class ConditionTable:
    """Learned per-modality embedding rows, added to every frame."""

    rows: Tensor  # |M| x d
    names: tuple[str, ...]

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ContractError(f"modality {name!r} has no condition row") from None


@lru_cache(maxsize=32)
def _sinusoid_rows(max_t: int, d: int) -> np.ndarray:
    positions = np.arange(max_t, dtype=np.float64)[:, None]
    two_i = 2.0 * np.arange(d // 2, dtype=np.float64)
    angles = positions / np.power(10000.0, two_i / d)
    rows = np.empty((max_t, d), dtype=np.float64)
    rows[:, 0::2] = np.sin(angles)
    rows[:, 1::2] = np.cos(angles)
    rows.setflags(write=False)
    return rows


def build_sinusoidal_table(max_t: int, d: int) -> PositionTable:
    """Closed-form sinusoidal table; cached per (max_t, d)."""
    if d < 2 or d % 2 != 0:
        raise ConfigurationError(f"position dimension must be even, got {d}")
    if max_t < 1:
        raise ConfigurationError(f"table length must be >= 1, got {max_t}")
    return PositionTable(_sinusoid_rows(max_t, d), max_t)


def fractional_index(max_t: int, t_j: int, t: int) -> int:
    """Position index r*t with r = floor(max_t / t_j)."""
    if t_j > max_t:
        raise ContractError(f"modality length {t_j} exceeds table length {max_t}")
    if not 0 <= t < t_j:
        raise ContractError(f"frame index {t} outside [0, {t_j})")
    return (max_t // t_j) * t


def fractional_indices(max_t: int, t_j: int) -> np.ndarray:
    """Vectorized fractional_index over all frames of one modality."""
    if t_j > max_t:
        raise ContractError(f"modality length {t_j} exceeds table length {max_t}")
    return (max_t // t_j) * np.arange(t_j, dtype=np.int64)


def init_condition_table(names: tuple[str, ...], d: int,
                         rng: np.random.Generator, dtype=np.float32) -> ConditionTable:
    return ConditionTable(init_embedding(rng, len(names), d, dtype), tuple(names))


def apply_conditions(x: Embeddings, modality_index: int,
                     conditions: ConditionTable, positions: PositionTable,
                     t_j: int | None = None,
                     max_t: int | None = None) -> Embeddings:
    """Augment embeddings to x + e + p; presence flags pass through.

    Absent rows receive e and p too: attention masking, not zeroing, hides
    them downstream.
    """
    if t_j is None:
        t_j = x.values.shape[0]
    if max_t is None:
        max_t = positions.max_t
    n_modalities = conditions.rows.shape[0]
    if not 0 <= modality_index < n_modalities:
        raise ContractError(
            f"modality index {modality_index} outside [0, {n_modalities})")
    if max_t > positions.max_t:
        raise ContractError(
            f"requested table length {max_t} exceeds built table {positions.max_t}")
    dtype = x.values.data.dtype
    pos_rows = positions.rows[fractional_indices(max_t, t_j)].astype(dtype)
    values = x.values + conditions.rows[modality_index] + Tensor(pos_rows)
    return Embeddings(values, x.presence)
