"""Leaky integrate-and-fire dynamics and the ArcTan surrogate.

One call to :func:`lif_step` advances a population of current-based LIF
neurons by one timestep::

    S(t)   = H(U(t) - u_th)                     H(0) = 1
    I(t+1) = alpha * I(t) + drive(t)
    U(t+1) = beta * U(t) + I(t) - u_th * S(t)   (soft reset)

``drive`` is the feedforward synaptic input (the layer's convolution output);
there are no recurrent synapses.  Parameters are per channel and broadcast
over the trailing (length) axis, so arrays shaped ``(..., C, L)`` take
parameters shaped ``(C,)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SurrogateConfig:
    width: float = 1.0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"surrogate width must be positive, got {self.width}")


@dataclass
class LifParams:
    alpha: np.ndarray
    beta: np.ndarray
    u_th: np.ndarray

    def channel_view(self, ndim: int):
        """Return the parameters reshaped to broadcast against ``(..., C, L)`` arrays."""
        if ndim < 2:
            return self.alpha, self.beta, self.u_th
        return self.alpha[:, None], self.beta[:, None], self.u_th[:, None]


@dataclass
class LifState:
    I: np.ndarray
    U: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "LifState":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))

    def copy(self) -> "LifState":
        return LifState(self.I.copy(), self.U.copy())


def heaviside(x):
    return (np.asarray(x) >= 0).astype(np.result_type(x, np.float32))


def arctan_sigmoid(x, cfg: SurrogateConfig = SurrogateConfig()):
    """Smooth step (1/pi) * arctan(pi x / a) + 1/2 whose derivative is the surrogate."""
    a = cfg.width
    return np.arctan(math.pi * np.asarray(x) / a) / math.pi + 0.5


def arctan_surrogate_grad(x, cfg: SurrogateConfig = SurrogateConfig()):
    a = cfg.width
    z = math.pi * np.asarray(x) / a
    return (1.0 / a) / (1.0 + z * z)


def lif_step(state: LifState, p: LifParams, drive: np.ndarray, *, relax: SurrogateConfig | None = None):
    """Advance one timestep; returns ``(new_state, spikes)``.

    With ``relax`` set, the hard threshold is replaced by the smooth
    :func:`arctan_sigmoid` of the same width (used only for gradient checks).
    """
    drive = np.asarray(drive)
    if drive.shape != state.U.shape:
        raise ValueError(f"drive shape {drive.shape} does not match state {state.U.shape}")
    if not np.all(np.isfinite(drive)):
        raise FloatingPointError("non-finite LIF drive")
    alpha, beta, u_th = p.channel_view(drive.ndim)
    x = state.U - u_th
    spikes = heaviside(x) if relax is None else arctan_sigmoid(x, relax)
    spikes = spikes.astype(state.U.dtype, copy=False)
    I_next = alpha * state.I + drive
    # where() keeps u_th = inf (a never-firing population) from producing inf * 0
    reset = np.where(spikes != 0, u_th, 0) * spikes
    U_next = beta * state.U + state.I - reset
    return LifState(I_next.astype(state.I.dtype, copy=False), U_next.astype(state.U.dtype, copy=False)), spikes
