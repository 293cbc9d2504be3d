"""Train a small attention aggregator and compare it with the classical
baselines on held-out sequences.

This is a miniature of the full study: a few dozen aligned 48x48 sequences,
a handful of epochs, and reconstruction quality measured as RMSE / PSNR /
SSIM against the clean labels.  Expect the numbers to be rough -- the point
is the workflow, not state-of-the-art quality.
"""

import numpy as np

from diar.aggregator import (
    TrainConfig,
    build_model,
    model_forward,
    to_image,
    train,
)
from diar.baselines import mean_stack, median_stack, weiss_mle
from diar.datagen import generate_dataset
from diar.metrics import report

train_set = generate_dataset(32, master_seed=1, aligned=True,
                             frame_count=4, height=48, width=48)
test_set = generate_dataset(6, master_seed=2, aligned=True,
                            frame_count=4, height=48, width=48)

model = build_model(mode="softmax_weighted", window_m=4, seed=0,
                    dtype=np.float32)
history = train(model, train_set, TrainConfig(epochs=4, seed=0))
for rec in history.epochs:
    print(f"epoch {rec['epoch']}: train L1 {rec['train_loss']:.4f}, "
          f"val L1 {rec['val_loss']:.4f} ({rec['wall_seconds']:.0f}s)")
print(f"best epoch {history.best_epoch} (val L1 {history.best_val_loss:.4f})")

methods = {
    "median": lambda frames: median_stack(frames),
    "mean": lambda frames: mean_stack(frames),
    "mle": lambda frames: weiss_mle(frames).image,
    "attention": lambda frames: to_image(model_forward(frames, model)),
}
print(f"\n{'method':<10} {'rmse':>7} {'psnr':>7} {'ssim':>7}")
for name, fn in methods.items():
    reps = [report(fn(seq.frames), seq.label) for seq in test_set]
    print(f"{name:<10} {np.mean([r.rmse for r in reps]):7.4f} "
          f"{np.mean([r.psnr for r in reps]):7.2f} "
          f"{np.mean([r.ssim for r in reps]):7.4f}")
