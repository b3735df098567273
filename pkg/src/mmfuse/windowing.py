"""Fixed-duration window extraction across multi-rate modality streams.

Training windows are drawn uniformly at random (optionally gated on the
presence ratio of one modality); evaluation windows tile the record
sequentially without overlap. A window's slice of modality j holds
``floor(rate_j * duration)`` frames starting at row ``floor(start * rate_j)``,
so every slice covers the same wall-clock interval.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .datamodel import ModalityDescriptor, VideoRecord
from .errors import DegenerateWindowError, SchemaError, TooShortError

__all__ = [
    "WindowSlice",
    "Window",
    "frames_in_window",
    "extract_window",
    "sample_training_window",
    "enumerate_eval_windows",
    "window_presence_ratio",
    "window_rng",
    "GATE_RETRY_BUDGET",
]

# retry budget for presence-gated training draws before falling back to the
# best candidate seen
GATE_RETRY_BUDGET = 20

# guards float remainders like 25 * 0.36 = 8.999999... from dropping a frame
_EPS = 1e-9


@dataclass
class WindowSlice:
    """One modality's share of a window."""

    descriptor: ModalityDescriptor
    frames: np.ndarray  # T_j x raw_dim
    presence: np.ndarray  # T_j


@dataclass
class Window:
    """A fixed-duration slice across all modalities of one record."""

    record_id: str
    label: int
    start_seconds: float
    duration_seconds: float
    slices: dict[str, WindowSlice]
    below_threshold: bool = False  # set when the presence gate could not be met

    @property
    def fused_length(self) -> int:
        return sum(s.frames.shape[0] for s in self.slices.values())


def frames_in_window(rate: float, duration: float) -> int:
    """Number of whole frames of a rate-``rate`` stream inside ``duration`` seconds."""
    if rate <= 0 or duration <= 0:
        raise DegenerateWindowError(
            f"rate and duration must be positive, got rate={rate} duration={duration}")
    count = int(np.floor(rate * duration + _EPS))
    if count == 0:
        raise DegenerateWindowError(
            f"window of {duration}s holds no frame at {rate} frames/s")
    return count


def extract_window(record: VideoRecord, start_seconds: float,
                   duration_seconds: float) -> Window:
    """Cut the slice [start, start+duration) out of every stream of a record."""
    slices: dict[str, WindowSlice] = {}
    for name, stream in record.streams.items():
        rate = stream.descriptor.rate
        count = frames_in_window(rate, duration_seconds)
        first = int(np.floor(start_seconds * rate + _EPS))
        if first + count > stream.total_frames:
            raise TooShortError(
                f"{record.id}: window [{start_seconds}, "
                f"{start_seconds + duration_seconds}) exceeds stream {name}")
        slices[name] = WindowSlice(stream.descriptor,
                                   stream.frames[first:first + count],
                                   stream.presence[first:first + count])
    return Window(record.id, record.label, float(start_seconds),
                  float(duration_seconds), slices)


def window_presence_ratio(window: Window, modality: str) -> float:
    """Fraction of presence-1 frames of one modality inside the window."""
    if modality not in window.slices:
        raise SchemaError(f"window has no modality {modality!r}")
    presence = window.slices[modality].presence
    return float(presence.sum()) / presence.shape[0]


def sample_training_window(record: VideoRecord, duration_seconds: float,
                           threshold: float = 0.0,
                           gate_modality: str | None = None,
                           rng: np.random.Generator | None = None) -> Window:
    """Draw one uniform random window, optionally gated on modality presence.

    With a gate configured, up to ``GATE_RETRY_BUDGET`` draws are tried; if
    none reaches ``threshold``, the best-ratio candidate is returned with its
    ``below_threshold`` flag set.
    """
    if not 0.0 <= threshold <= 1.0:
        raise DegenerateWindowError(f"threshold must lie in [0, 1], got {threshold}")
    span = record.span_seconds
    if span < duration_seconds:
        raise TooShortError(
            f"{record.id}: span {span:.3f}s is shorter than one "
            f"{duration_seconds}s window")
    if rng is None:
        rng = np.random.default_rng()
    free = span - duration_seconds

    if gate_modality is None or threshold == 0.0:
        window = extract_window(record, rng.uniform(0.0, free), duration_seconds)
        if gate_modality is not None:
            ratio = window_presence_ratio(window, gate_modality)
            window.below_threshold = ratio < threshold
        return window

    best: Window | None = None
    best_ratio = -1.0
    for _ in range(GATE_RETRY_BUDGET):
        window = extract_window(record, rng.uniform(0.0, free), duration_seconds)
        ratio = window_presence_ratio(window, gate_modality)
        if ratio >= threshold:
            return window
        if ratio > best_ratio:
            best, best_ratio = window, ratio
    best.below_threshold = True
    return best


def enumerate_eval_windows(record: VideoRecord,
                           duration_seconds: float) -> list[Window]:
    """Sequential non-overlapping windows at starts 0, d, 2d, ...

    The trailing remainder shorter than one window is discarded.
    """
    span = record.span_seconds
    n = int(np.floor(span / duration_seconds + _EPS))
    if n == 0:
        raise TooShortError(
            f"{record.id}: span {span:.3f}s is shorter than one "
            f"{duration_seconds}s window")
    return [extract_window(record, i * duration_seconds, duration_seconds)
            for i in range(n)]


def window_rng(seed: int, epoch: int, record_id: str) -> np.random.Generator:
    """Deterministic per-(seed, epoch, record) random source for window draws."""
    return np.random.default_rng([seed, epoch, zlib.crc32(record_id.encode("utf-8"))])
