"""Synthetic recordings with a plantable class cue, for end-to-end checks.

Four streams at mismatched rates imitate a desk-scale recording setup: a
fast feature stream, a slower embedding stream, a landmark stream, and a
binary state stream. Class 1 recordings carry a mean shift on a seeded
fraction of the embedding stream's present frames; class 0 recordings are
pure noise. Presence drops out in bursts, so windows differ in how much of
each modality they actually contain.

Everything is reproducible byte for byte from the SynthSpec seed: each
record draws from its own generator keyed by (seed, record index).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import (
    DatasetManifest,
    ManifestRecord,
    ModalityStream,
    load_manifest,
    preset_config,
    write_manifest,
    write_stream_file,
)
from .errors import ConfigurationError

__all__ = [
    "SynthSpec",
    "sample_presence",
    "plant_cue",
    "generate_dataset",
    "linear_probe_accuracy",
]

_EPS = 1e-9


@dataclass
class SynthSpec:
    """Shape and signal strength of one generated dataset."""

    train_records: int = 24
    val_records: int = 8
    test_records: int = 48
    min_duration: float = 30.0
    max_duration: float = 60.0
    cue_modality: str = "face_embed"
    cue_magnitude: float = 1.0
    cue_fraction: float = 0.6
    noise_scale: float = 1.0
    dropout_rate: float = 0.1
    burst_frames: int = 25
    seed: int = 0

    def __post_init__(self):
        if min(self.train_records, self.val_records, self.test_records) < 1:
            raise ConfigurationError("every split needs at least one record")
        if not 0.0 < self.min_duration <= self.max_duration:
            raise ConfigurationError(
                f"bad duration range [{self.min_duration}, {self.max_duration}]")
        if not 0.0 <= self.cue_fraction <= 1.0:
            raise ConfigurationError(
                f"cue_fraction {self.cue_fraction} outside [0, 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(
                f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if self.burst_frames < 1:
            raise ConfigurationError("burst_frames must be >= 1")
        names = [d.name for d in preset_config("synth")]
        if self.cue_modality not in names:
            raise ConfigurationError(
                f"cue modality {self.cue_modality!r} not in {names}")


def sample_presence(t: int, dropout_rate: float, burst_frames: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Presence flags with absence bursts totalling ~dropout_rate of frames."""
    presence = np.ones(t, dtype=np.uint8)
    if dropout_rate <= 0.0:
        return presence
    start_probability = dropout_rate / burst_frames
    starts = np.flatnonzero(rng.random(t) < start_probability)
    for s in starts:
        presence[s:s + burst_frames] = 0
    if presence.sum() == 0:  # keep every stream observable somewhere
        presence[0] = 1
    return presence


def plant_cue(frames: np.ndarray, presence: np.ndarray, magnitude: float,
              fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Add a constant shift to a random fraction of the present frames.

    Returns a copy; untouched rows are bit-identical to the input. With
    fraction 1.0 every present frame is shifted by exactly ``magnitude``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError(f"fraction {fraction} outside [0, 1]")
    out = frames.copy()
    present = np.flatnonzero(presence)
    k = int(round(fraction * present.size))
    if k:
        chosen = rng.choice(present, size=k, replace=False)
        out[chosen] += np.float32(magnitude)
    return out


def generate_dataset(spec: SynthSpec, out_dir) -> Path:
    """Write stream files and a manifest; returns the manifest path.

    Labels alternate within each split, so classes stay balanced. The cue
    is planted only in class 1 records, only in the cue modality, before
    absent rows are zeroed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    descriptors = preset_config("synth")
    records = []
    index = 0
    plan = (("train", spec.train_records), ("val", spec.val_records),
            ("test", spec.test_records))
    for split, count in plan:
        for k in range(count):
            rec_id = f"{split}_{k:03d}"
            label = k % 2
            rng = np.random.default_rng([spec.seed, index])
            duration = rng.uniform(spec.min_duration, spec.max_duration)
            paths = {}
            for desc in descriptors:
                # floor keeps each stream inside its own frame period of the
                # nominal span, which record validation demands of fast rates
                t = max(1, int(np.floor(desc.rate * duration + _EPS)))
                presence = sample_presence(t, spec.dropout_rate,
                                           spec.burst_frames, rng)
                if desc.encoder_kind == "state":
                    frames = rng.integers(0, desc.state_count, size=(t, 1))
                    frames = frames.astype(np.float32)
                else:
                    frames = rng.standard_normal((t, desc.raw_dim))
                    frames = (frames * spec.noise_scale).astype(np.float32)
                if label == 1 and desc.name == spec.cue_modality:
                    frames = plant_cue(frames, presence, spec.cue_magnitude,
                                       spec.cue_fraction, rng)
                frames = frames * presence[:, None]
                path = out_dir / f"{rec_id}_{desc.name}.mmds"
                write_stream_file(ModalityStream(desc, frames, presence), path)
                paths[desc.name] = path
            records.append(ManifestRecord(rec_id, label, split, paths))
            index += 1
    manifest_path = out_dir / "manifest.tsv"
    write_manifest(records, manifest_path)
    return manifest_path


def linear_probe_accuracy(manifest: DatasetManifest,
                          modality: str = "face_embed",
                          fit_split: str = "train",
                          eval_split: str = "test") -> float:
    """Accuracy of a closed-form threshold on the mean present-frame value.

    The planted cue shifts the class-conditional mean of this scalar, so a
    midpoint threshold between the two class means separates the labels if
    and only if the cue survived generation. This is the sanity oracle the
    learned model is compared against.
    """

    def feature(meta) -> float:
        stream = manifest.load_record(meta).streams[modality]
        present = stream.presence.astype(bool)
        return float(stream.frames[present].mean())

    fit = [(feature(m), m.label) for m in manifest.by_split(fit_split)]
    mean0 = np.mean([f for f, lab in fit if lab == 0])
    mean1 = np.mean([f for f, lab in fit if lab == 1])
    threshold = 0.5 * (mean0 + mean1)
    positive_above = mean1 >= mean0
    correct = 0
    eval_meta = manifest.by_split(eval_split)
    for meta in eval_meta:
        above = feature(meta) >= threshold
        predicted = int(above == positive_above)
        correct += predicted == meta.label
    return correct / len(eval_meta)


def load_synth_manifest(manifest_path) -> DatasetManifest:
    """Parse a generated manifest against the synthetic modality schema."""
    return load_manifest(manifest_path, preset_config("synth"))
