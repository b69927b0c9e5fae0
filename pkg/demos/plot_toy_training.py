"""
Training on a toy corpus
========================

A tiny synthetic corpus (pulse-train "speech" mixed with coloured noise)
is enough to watch the whole pipeline: pairing files, splitting,
normalising, cropping segments into batches and taking Adam steps on the
LSD loss.  A shallow ladder keeps it to seconds on one core.
"""

import tempfile
from pathlib import Path

import numpy as np

from snnse import data, synthetic
from snnse.model import ModelConfig, build_unet
from snnse.training import RunConfig, overfit, train

root = Path(tempfile.mkdtemp())
clean_dir, noisy_dir = synthetic.write_corpus(root / "corpus", 6, seed=0, duration=(1.0, 1.5))
manifest = data.scan_dataset(clean_dir, noisy_dir)
print("%d pairs, %.1f s of audio" % (len(manifest), manifest.hours * 3600))

train_set, val_set = data.split_train_val(manifest, 0.2, seed=0)
print("train:", [p.id for p in train_set], "val:", [p.id for p in val_set])

loader = data.LpsLoader()
norm = data.compute_norm_stats(train_set.pairs, loader=loader)
print("noisy LPS mean %.3f, std %.3f" % (norm.mean, norm.std))

###############################################################################
# One epoch of batches: each utterance contributes one random crop.

for b in data.make_batches(train_set.pairs, epoch_seed=1, batch_size=2, segment=48, loader=loader):
    print("batch", b.ids, "starts", b.starts, "shape", b.noisy.shape)

###############################################################################
# Overfitting one utterance is the quickest sign that gradients flow.

small = ModelConfig(bins=257, encoder=((8, 5, 1), (16, 5, 2), (16, 5, 2)), decoder=((16, 5), (8, 5)), readout_kernel=5)
model = build_unet(small, seed=0, norm=norm)
noisy, clean = loader(train_set.pairs[0])
history = overfit(model, noisy, clean, steps=60)
print("overfit LSD: " + " ".join("%.2f" % v for v in history[::10]) + " ... %.2f" % history[-1])

###############################################################################
# The same thing end to end, with checkpoints and a log.

(root / "model.cfg").write_text(small.to_text())
cfg = RunConfig(clean_dir=str(clean_dir), noisy_dir=str(noisy_dir), out=str(root / "run"), epochs=3, batch=2,
                segment_frames=48, val_fraction=0.2, model_config=str(root / "model.cfg"))
result = train(cfg, loader)
print((root / "run" / "train_log.tsv").read_text())
