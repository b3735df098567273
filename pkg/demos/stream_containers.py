"""Writing, reading, and validating the binary stream container.

Run with: python3 demos/stream_containers.py
"""

import tempfile
from pathlib import Path

import numpy as np

from mmfuse.datamodel import (
    ModalityDescriptor,
    ModalityStream,
    read_stream_file,
    read_stream_header,
    write_stream_file,
)
from mmfuse.errors import CorruptionError

work = Path(tempfile.mkdtemp(prefix="mmfuse_streams_"))

# A 4 Hz gaze stream over five seconds with two unobserved frames. Absent
# frames are stored as zeros and flagged off in the presence mask.
desc = ModalityDescriptor(name="gaze", rate=4.0, raw_dim=3,
                          encoder_kind="projection")
rng = np.random.default_rng(7)
frames = rng.standard_normal((20, 3)).astype(np.float32)
presence = np.ones(20, dtype=np.uint8)
presence[[4, 11]] = 0
frames[presence == 0] = 0.0

path = work / "gaze.mmds"
write_stream_file(ModalityStream(desc, frames, presence), path)
print(f"wrote {path} ({path.stat().st_size} bytes)")

header = read_stream_header(path)
for key, value in header.items():
    print(f"  {key}: {value}")

loaded = read_stream_file(path, desc)
print(f"round trip exact: {np.array_equal(loaded.frames, frames)}")
print(f"duration: {loaded.duration_seconds:.2f}s, "
      f"present {int(loaded.presence.sum())}/{loaded.total_frames} frames")

# Truncated files are rejected rather than silently shortened.
clipped = work / "clipped.mmds"
clipped.write_bytes(path.read_bytes()[:-7])
try:
    read_stream_file(clipped, desc)
except CorruptionError as exc:
    print(f"truncated file rejected: {exc}")
