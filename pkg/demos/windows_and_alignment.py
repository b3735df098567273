"""How windows cut across rates and how positions line up between them.

Run with: python3 demos/windows_and_alignment.py
"""

import numpy as np

from mmfuse.datamodel import ModalityDescriptor, ModalityStream, VideoRecord
from mmfuse.positioning import build_sinusoidal_table, fractional_indices
from mmfuse.windowing import enumerate_eval_windows, frames_in_window

# One recording, three rates. 95 seconds of material.
descriptors = [
    ModalityDescriptor("audio", 100.0, 2, "projection"),
    ModalityDescriptor("video", 25.0, 2, "projection"),
    ModalityDescriptor("blink", 30.0, 1, "state", state_count=2),
]
rng = np.random.default_rng(0)
streams = {}
for desc in descriptors:
    t = int(desc.rate * 95)
    if desc.encoder_kind == "state":
        frames = rng.integers(0, 2, (t, 1)).astype(np.float32)
    else:
        frames = rng.standard_normal((t, 2)).astype(np.float32)
    streams[desc.name] = ModalityStream(desc, frames,
                                        np.ones(t, dtype=np.uint8))
record = VideoRecord("demo", 0, "train", streams)

print(f"record spans {record.span_seconds:.0f}s")
for desc in descriptors:
    print(f"  {desc.name}: {frames_in_window(desc.rate, 9.0)} frames "
          f"per 9s window at {desc.rate:g} Hz")

windows = enumerate_eval_windows(record, 9.0)
print(f"9s windows: {len(windows)} "
      f"(starts {[w.start_seconds for w in windows[:4]]}... , "
      f"trailing {95 - 9 * len(windows)}s discarded)")

# Within a window the audio stream is the longest, so every slower stream
# maps frame t to audio position floor(max_T / T_j) * t. Frames recorded at
# the same instant therefore share one sinusoidal row exactly.
max_t = frames_in_window(100.0, 9.0)
video_t = frames_in_window(25.0, 9.0)
table = build_sinusoidal_table(max_t, 64)
video_positions = fractional_indices(max_t, video_t)
print(f"audio rows per window: {max_t}, video rows: {video_t}")
print(f"video frame 0..4 use audio positions {video_positions[:5].tolist()}")
shared = np.array_equal(table.rows[video_positions[5]], table.rows[20])
print(f"video frame 5 and audio frame 20 share one position row: {shared}")
