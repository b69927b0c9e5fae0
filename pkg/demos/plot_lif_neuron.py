"""
A single leaky integrate-and-fire neuron
========================================

Each spiking layer integrates its convolution output into a synaptic
current, leaks it into a membrane potential and fires when the membrane
reaches threshold.  After a spike the threshold is subtracted from the
membrane (soft reset).
"""

import numpy as np

from snnse.neuron import LifParams, LifState, SurrogateConfig, arctan_surrogate_grad, lif_step

p = LifParams(np.array([0.0]), np.array([0.5]), np.array([1.0]))
state = LifState.zeros((1, 1), np.float64)

# constant drive 0.6 with no current memory and a half-life of one step
print("t   U       spike")
for t in range(8):
    u = state.U[0, 0]
    state, s = lif_step(state, p, np.full((1, 1), 0.6))
    print("%d   %.4f  %d" % (t, u, s[0, 0]))

###############################################################################
# Two steps of latency
# --------------------
# The drive first lands in the current and reaches the membrane one step
# later, so a spiking layer answers its input two timesteps after it
# arrives.  A single strong pulse shows it.

state = LifState.zeros((1, 1), np.float64)
for t, d in enumerate([5.0, 0, 0, 0]):
    state, s = lif_step(state, LifParams(np.array([0.0]), np.array([0.0]), np.array([1.0])), np.full((1, 1), d))
    print("drive %.0f at t=%d -> spike %d" % (d, t, s[0, 0]))

###############################################################################
# The surrogate derivative
# ------------------------
# The Heaviside step has no useful derivative.  Training substitutes the
# derivative of a scaled arctan, which peaks at the threshold.

x = np.linspace(-3, 3, 7)
for width in (0.5, 1.0, 2.0):
    g = arctan_surrogate_grad(x, SurrogateConfig(width))
    print("width %.1f:" % width, np.array2string(g, precision=3))
