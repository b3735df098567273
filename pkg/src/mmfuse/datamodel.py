"""Dataset schema, the binary feature container, manifests, and presets.

A recording is a set of modality streams with individual frame rates and
per-frame presence flags. Streams live on disk in a little-endian binary
container (magic ``MMDS``); a dataset is described by a tab-separated
manifest listing one record per line with its label, split, and per-modality
file paths.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    CorruptionError,
    DataError,
    FormatError,
    ParseError,
    SchemaError,
    ValidationError,
)

__all__ = [
    "ENCODER_KINDS",
    "SPLITS",
    "ModalityDescriptor",
    "ModalityStream",
    "VideoRecord",
    "ManifestRecord",
    "DatasetManifest",
    "read_stream_file",
    "read_stream_header",
    "write_stream_file",
    "load_manifest",
    "write_manifest",
    "preset_config",
]

ENCODER_KINDS = ("projection", "landmark_set", "state")
SPLITS = ("train", "val", "test")
SIDES = ("left", "right")

STREAM_MAGIC = b"MMDS"
STREAM_VERSION = 1
_HEADER = struct.Struct("<4sIfQI")  # magic, version, rate f32, frames u64, dim u32


@dataclass(frozen=True)
class ModalityDescriptor:
    """Static schema of one modality: rate, raw width, and encoder kind."""

    name: str
    rate: float
    raw_dim: int
    encoder_kind: str
    token_count: int | None = None  # landmark_set only
    token_dim: int | None = None  # landmark_set only
    state_count: int | None = None  # state only
    side: str | None = None  # landmark_set only, distinguishes paired streams

    def __post_init__(self):
        if not self.name:
            raise ValidationError("modality name must be non-empty")
        if self.rate <= 0:
            raise ValidationError(f"{self.name}: rate must be positive, got {self.rate}")
        if self.raw_dim < 1:
            raise ValidationError(f"{self.name}: raw_dim must be >= 1, got {self.raw_dim}")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValidationError(
                f"{self.name}: unknown encoder kind {self.encoder_kind!r}")
        if self.encoder_kind == "landmark_set":
            if self.token_count is None or self.token_dim is None:
                raise ValidationError(
                    f"{self.name}: landmark_set needs token_count and token_dim")
            if self.token_count * self.token_dim != self.raw_dim:
                raise ValidationError(
                    f"{self.name}: token_count*token_dim = "
                    f"{self.token_count * self.token_dim} != raw_dim {self.raw_dim}")
        elif self.encoder_kind == "state":
            if self.state_count is None or self.state_count < 2:
                raise ValidationError(f"{self.name}: state kind needs state_count >= 2")
            if self.raw_dim != 1:
                raise ValidationError(f"{self.name}: state kind requires raw_dim = 1")
        if self.side is not None:
            if self.encoder_kind != "landmark_set":
                raise ConfigurationError(
                    f"{self.name}: side applies only to landmark_set modalities")
            if self.side not in SIDES:
                raise ConfigurationError(f"{self.name}: side must be left or right")


@dataclass
class ModalityStream:
    """One modality's frame matrix plus its per-frame presence mask."""

    descriptor: ModalityDescriptor
    frames: np.ndarray  # total_frames x raw_dim, float32
    presence: np.ndarray  # total_frames, uint8 in {0, 1}

    def __post_init__(self):
        frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] != self.descriptor.raw_dim:
            raise SchemaError(
                f"{self.descriptor.name}: frames must be T x {self.descriptor.raw_dim}, "
                f"got {frames.shape}")
        presence = np.ascontiguousarray(self.presence, dtype=np.uint8)
        if presence.shape != (frames.shape[0],):
            raise ValidationError(
                f"{self.descriptor.name}: presence length {presence.shape} does not "
                f"match {frames.shape[0]} frames")
        if presence.size and presence.max() > 1:
            raise ValidationError(f"{self.descriptor.name}: presence flags must be 0 or 1")
        present = presence.astype(bool)
        if not np.isfinite(frames[present]).all():
            raise ValidationError(f"{self.descriptor.name}: NaN/Inf in a present frame")
        if frames[~present].any():
            raise ValidationError(
                f"{self.descriptor.name}: absent frames must be stored as zeros")
        if self.descriptor.encoder_kind == "state" and present.any():
            vals = frames[present, 0]
            if ((vals != np.floor(vals)) | (vals < 0)
                    | (vals >= self.descriptor.state_count)).any():
                raise ValidationError(
                    f"{self.descriptor.name}: state values must be integers in "
                    f"[0, {self.descriptor.state_count})")
        self.frames = frames
        self.presence = presence

    @property
    def total_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def duration_seconds(self) -> float:
        return self.total_frames / self.descriptor.rate


@dataclass
class VideoRecord:
    """A labeled recording: one stream per configured modality."""

    id: str
    label: int
    split: str
    streams: dict[str, ModalityStream]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"{self.id}: label must be 0 or 1, got {self.label}")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.id}: split must be one of {SPLITS}")
        if not self.streams:
            raise ValidationError(f"{self.id}: record has no streams")
        # all streams must describe the same wall-clock span, to within one
        # frame period of each stream's own rate
        longest = max(s.duration_seconds for s in self.streams.values())
        for name, stream in self.streams.items():
            slack = 1.0 / stream.descriptor.rate + 1e-9
            if abs(stream.duration_seconds - longest) > slack:
                raise ValidationError(
                    f"{self.id}: stream {name} spans {stream.duration_seconds:.3f}s "
                    f"but the longest stream spans {longest:.3f}s")

    @property
    def duration_seconds(self) -> float:
        return max(s.duration_seconds for s in self.streams.values())

    @property
    def span_seconds(self) -> float:
        """Wall-clock span covered by every stream (the shortest duration)."""
        return min(s.duration_seconds for s in self.streams.values())


# -- binary stream container ==============================================


def write_stream_file(stream: ModalityStream, path) -> None:
    """Serialize a stream to the binary container; read_stream_file inverts it."""
    # ModalityStream validates on construction; nothing is written for bad data
    frames = np.ascontiguousarray(stream.frames, dtype="<f4")
    presence = np.ascontiguousarray(stream.presence, dtype=np.uint8)
    header = _HEADER.pack(STREAM_MAGIC, STREAM_VERSION,
                          np.float32(stream.descriptor.rate),
                          frames.shape[0], frames.shape[1])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(frames.tobytes())
        fh.write(presence.tobytes())


def read_stream_header(path) -> dict:
    """Parse just the container header plus the presence ratio.

    Works without a descriptor, so it can describe a file of unknown schema;
    the byte count is still verified against the declared shape.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the container header")
    magic, version, rate, total, dim = _HEADER.unpack_from(blob)
    if magic != STREAM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != STREAM_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    expected = _HEADER.size + 4 * total * dim + total
    if len(blob) != expected:
        raise CorruptionError(
            f"{path}: expected {expected} bytes for {total}x{dim} frames, "
            f"found {len(blob)}")
    presence = np.frombuffer(blob, dtype=np.uint8, count=total,
                             offset=_HEADER.size + 4 * total * dim)
    ratio = float(presence.mean()) if total else 0.0
    return {"magic": magic.decode("ascii"), "version": version,
            "rate": float(rate), "frames": total, "dim": dim,
            "duration_seconds": total / float(rate),
            "presence_ratio": ratio}


def read_stream_file(path, descriptor: ModalityDescriptor) -> ModalityStream:
    """Load a stream from the binary container, checking it against ``descriptor``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the container header")
    magic, version, rate, total, dim = _HEADER.unpack_from(blob)
    if magic != STREAM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != STREAM_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    if dim != descriptor.raw_dim:
        raise SchemaError(
            f"{path}: header dimension {dim} != descriptor "
            f"{descriptor.name} raw_dim {descriptor.raw_dim}")
    if np.float32(rate) != np.float32(descriptor.rate):
        raise SchemaError(
            f"{path}: header rate {rate} != descriptor {descriptor.name} "
            f"rate {descriptor.rate}")
    expected = _HEADER.size + 4 * total * dim + total
    if len(blob) < expected:
        raise CorruptionError(
            f"{path}: truncated payload ({len(blob)} bytes, need {expected})")
    if len(blob) > expected:
        raise CorruptionError(
            f"{path}: trailing bytes after payload ({len(blob)} > {expected})")
    offset = _HEADER.size
    frames = np.frombuffer(blob, dtype="<f4", count=total * dim,
                           offset=offset).reshape(total, dim)
    presence = np.frombuffer(blob, dtype=np.uint8, count=total,
                             offset=offset + 4 * total * dim)
    if presence.size and presence.max() > 1:
        raise CorruptionError(f"{path}: presence bytes must be 0 or 1")
    return ModalityStream(descriptor, frames.copy(), presence.copy())


# -- manifests =============================================================


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    label: int
    split: str
    paths: dict[str, Path]  # modality name -> absolute stream path


@dataclass
class DatasetManifest:
    """Parsed manifest: record lines in file order plus the modality schema."""

    records: list[ManifestRecord]
    modality_config: list[ModalityDescriptor]
    root: Path

    def by_split(self, split: str) -> list[ManifestRecord]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def descriptor(self, name: str) -> ModalityDescriptor:
        for d in self.modality_config:
            if d.name == name:
                return d
        raise SchemaError(f"unknown modality {name!r}")

    def load_record(self, record: ManifestRecord) -> VideoRecord:
        streams = {d.name: read_stream_file(record.paths[d.name], d)
                   for d in self.modality_config}
        return VideoRecord(record.id, record.label, record.split, streams)


def load_manifest(path, modality_config: list[ModalityDescriptor]) -> DatasetManifest:
    """Parse a manifest file against a modality configuration.

    Lines are tab-separated ``id label split name=relpath ...``; ``#`` starts
    a comment line. Paths resolve relative to the manifest's directory and
    must exist.
    """
    path = Path(path)
    root = path.parent
    known = {d.name for d in modality_config}
    records: list[ManifestRecord] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) < 4:
                raise ParseError(
                    f"expected id, label, split and at least one modality path",
                    line_number=lineno)
            rec_id, label_s, split = fields[0], fields[1], fields[2]
            if label_s not in ("0", "1"):
                raise ParseError(f"label must be 0 or 1, got {label_s!r}",
                                 line_number=lineno)
            if split not in SPLITS:
                raise ParseError(f"split must be one of {SPLITS}, got {split!r}",
                                 line_number=lineno)
            if rec_id in seen_ids:
                raise SchemaError(f"duplicate record id {rec_id!r} (line {lineno})")
            seen_ids.add(rec_id)
            paths: dict[str, Path] = {}
            for tok in fields[3:]:
                name, sep, rel = tok.partition("=")
                if not sep or not rel:
                    raise ParseError(f"malformed modality field {tok!r}",
                                     line_number=lineno)
                if name not in known:
                    raise SchemaError(f"unknown modality {name!r} (line {lineno})")
                if name in paths:
                    raise SchemaError(
                        f"duplicate modality {name!r} for record {rec_id!r}")
                paths[name] = (root / rel).resolve()
            missing = known - set(paths)
            if missing:
                raise SchemaError(
                    f"record {rec_id!r} missing modalities {sorted(missing)}")
            for name, p in paths.items():
                if not p.is_file():
                    raise DataError(
                        f"record {rec_id!r}: stream file for {name!r} not found: {p}")
            records.append(ManifestRecord(rec_id, int(label_s), split, paths))
    return DatasetManifest(records, list(modality_config), root)


def write_manifest(records: list[ManifestRecord], path) -> None:
    """Write manifest lines (paths relative to the manifest's directory)."""
    path = Path(path)
    root = path.parent.resolve()
    lines = []
    for rec in records:
        parts = [rec.id, str(rec.label), rec.split]
        for name, p in rec.paths.items():
            parts.append(f"{name}={Path(p).resolve().relative_to(root).as_posix()}")
        lines.append("\t".join(parts))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- presets ================================================================

_REQUIRED = object()


def _build_preset(name: str, spec: dict, overrides: dict) -> dict:
    unknown = set(overrides) - set(spec)
    if unknown:
        raise ConfigurationError(
            f"preset {name!r} does not accept {sorted(unknown)}; "
            f"valid fields: {sorted(spec)}")
    merged = dict(spec)
    merged.update(overrides)
    missing = [k for k, v in merged.items() if v is _REQUIRED]
    if missing:
        raise ConfigurationError(
            f"preset {name!r} requires values for {sorted(missing)} "
            f"(not stated by the upstream feature sets)")
    return merged


def preset_config(name: str, **overrides) -> list[ModalityDescriptor]:
    """Modality configurations for the supported dataset families.

    Dimensions the upstream feature sets leave open (for example the raw
    COVAREP width) are mandatory keyword arguments; stated dimensions are
    fixed. Frame rates of video-derived streams default to common capture
    rates and may be overridden.
    """
    if name == "dvlog":
        cfg = _build_preset(name, {"video_rate": 25.0, "audio_rate": 100.0}, overrides)
        vr, ar = cfg["video_rate"], cfg["audio_rate"]
        return [
            ModalityDescriptor("voice_embedding", ar, 256, "projection"),
            ModalityDescriptor("face_embedding", vr, 256, "projection"),
            ModalityDescriptor("face_landmarks", vr, 204, "landmark_set",
                               token_count=68, token_dim=3),
            ModalityDescriptor("body_landmarks", vr, 99, "landmark_set",
                               token_count=33, token_dim=3),
            ModalityDescriptor("hand_left_landmarks", vr, 63, "landmark_set",
                               token_count=21, token_dim=3, side="left"),
            ModalityDescriptor("hand_right_landmarks", vr, 63, "landmark_set",
                               token_count=21, token_dim=3, side="right"),
            ModalityDescriptor("gaze", vr, 3, "projection"),
            ModalityDescriptor("blink", vr, 1, "state", state_count=2),
        ]
    if name == "daicwoz":
        cfg = _build_preset(name, {
            "covarep_dim": _REQUIRED, "action_unit_count": _REQUIRED,
            "head_pose_dim": _REQUIRED, "gaze_dim": 3,
            "video_rate": 30.0, "audio_rate": 100.0,
        }, overrides)
        vr, ar = cfg["video_rate"], cfg["audio_rate"]
        return [
            ModalityDescriptor("covarep", ar, int(cfg["covarep_dim"]), "projection"),
            ModalityDescriptor("formants", ar, 5, "projection"),
            ModalityDescriptor("face_landmarks", vr, 204, "landmark_set",
                               token_count=68, token_dim=3),
            ModalityDescriptor("action_units", vr, int(cfg["action_unit_count"]),
                               "projection"),
            ModalityDescriptor("gaze", vr, int(cfg["gaze_dim"]), "projection"),
            ModalityDescriptor("head_pose", vr, int(cfg["head_pose_dim"]),
                               "projection"),
        ]
    if name == "edaic":
        cfg = _build_preset(name, {
            "face_embedding_dim": _REQUIRED, "action_unit_count": _REQUIRED,
            "head_pose_dim": _REQUIRED, "gaze_dim": 3,
            "video_rate": 30.0, "audio_rate": 100.0,
        }, overrides)
        vr, ar = cfg["video_rate"], cfg["audio_rate"]
        return [
            ModalityDescriptor("mfcc", ar, 39, "projection"),
            ModalityDescriptor("egemaps", ar, 88, "projection"),
            ModalityDescriptor("face_embedding", vr, int(cfg["face_embedding_dim"]),
                               "projection"),
            ModalityDescriptor("gaze", vr, int(cfg["gaze_dim"]), "projection"),
            ModalityDescriptor("head_pose", vr, int(cfg["head_pose_dim"]),
                               "projection"),
            ModalityDescriptor("action_units", vr, int(cfg["action_unit_count"]),
                               "projection"),
        ]
    if name == "synth":
        cfg = _build_preset(name, {}, overrides)
        return [
            ModalityDescriptor("mic", 100.0, 32, "projection"),
            ModalityDescriptor("face_embed", 25.0, 32, "projection"),
            ModalityDescriptor("pose", 25.0, 39, "landmark_set",
                               token_count=13, token_dim=3),
            ModalityDescriptor("blink", 30.0, 1, "state", state_count=2),
        ]
    raise ConfigurationError(f"unknown preset {name!r}")
