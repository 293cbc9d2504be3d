"""Generate a small synthetic dataset and look at what is inside it.

Every sequence is a set of distorted photographs of one flat "painting":
the clean painting is the label, each frame adds a smooth gain field,
specular highlights, soft shadows and opaque occluders, and (in misaligned
mode) a perspective change with its exact ground-truth homography.
"""

from pathlib import Path

import numpy as np

from diar.datagen import generate_dataset, read_dataset, write_dataset

out = Path(__file__).parent / "output" / "dataset"

seqs = generate_dataset(4, master_seed=7, aligned=False,
                        frame_count=5, height=96, width=96)
write_dataset(seqs, out)
print(f"wrote {len(seqs)} sequences to {out}")

# read it back: the on-disk format (PPM frames + homography CSV) round-trips
seqs = read_dataset(out)
for i, seq in enumerate(seqs):
    frames = np.stack([f.data for f in seq.frames])
    drift = np.abs(frames - seq.label.data).mean(axis=(1, 2, 3))
    print(f"seq {i}: {len(seq.frames)} frames, "
          f"mean |frame - label| per frame: {np.round(drift, 3)}")
    h = seq.homographies[1]
    print(f"  ground-truth homography of frame 1:\n{np.round(h.m / h.m[2, 2], 4)}")
