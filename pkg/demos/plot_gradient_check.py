"""
Checking the BPTT gradients against finite differences
=======================================================

Hard spikes have no derivative, so the backward pass cannot be checked
on them directly.  Relaxation mode swaps the step function for the same
smooth arctan whose derivative the surrogate uses; in that mode the
surrogate gradients are the true gradients and central differences must
agree with them.
"""

import dataclasses

import numpy as np

from snnse.engine import Tape, lsd_loss
from snnse.model import ModelConfig, NormalizationStats, build_unet

# two encoders, one decoder, a readout; 8 frequency bins
cfg = ModelConfig(bins=8, encoder=((3, 3, 1), (4, 3, 2)), decoder=((3, 3),), readout_kernel=3,
                  relax=True, detach_reset=False)
model = build_unet(cfg, seed=0, dtype=np.float64, norm=NormalizationStats(-2.0, 1.5))
rng = np.random.default_rng(0)
# each spiking layer answers two steps late; 8 steps let every parameter reach the output
noisy = rng.normal(-2.0, 1.5, (8, 2, 8))  # (time, batch, bins)
clean = rng.normal(-2.0, 1.5, (8, 2, 8))

with Tape() as tape:
    est, _ = model.forward(noisy)
    loss = lsd_loss(est, clean)
grads = tape.backward(loss)
print("loss %.6f" % float(loss.data))


def loss_value():
    return float(lsd_loss(model.forward(noisy)[0], clean).data)


###############################################################################
# Central differences, one parameter entry at a time.

eps = 1e-6
for name, t in model.named_params().items():
    num = np.zeros(t.shape)
    flat, out = t.data.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = loss_value()
        flat[i] = old - eps
        down = loss_value()
        flat[i] = old
        out[i] = (up - down) / (2 * eps)
    err = np.linalg.norm(grads[t] - num) / max(np.linalg.norm(num), 1e-12)
    print("%-14s rel. err %.1e" % (name, err))

###############################################################################
# With hard spikes and the reset detached (the training default) the same
# code runs, but the gradient is only a surrogate.

hard = build_unet(dataclasses.replace(cfg, relax=False, detach_reset=True), seed=0, dtype=np.float64)
with Tape() as tape:
    loss = lsd_loss(hard.forward(noisy)[0], clean)
g = tape.backward(loss)
print("surrogate gradient norm of enc1.weight: %.3e" % np.linalg.norm(g[hard.named_params()["enc1.weight"]]))
