"""Spiking layer primitives evaluated one STFT frame per timestep, plus spike accounting.

The model trains with whole-sequence tape ops (see :mod:`snnse.engine`);
the functions here advance a layer by a single timestep, which is what a
streaming or event-driven deployment does.  Both paths share
:func:`snnse.neuron.lif_step` and :func:`snnse.engine.conv1d_forward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, conv1d_forward, conv_out_len
from .neuron import LifParams, LifState, lif_step


class SpikeIntegrityError(ValueError):
    pass


@dataclass
class SpikingConv:
    """Strided convolution over frequency feeding per-channel LIF neurons."""

    name: str
    weight: Tensor
    bias: Tensor
    alpha: Tensor
    beta: Tensor
    u_th: Tensor
    stride: int = 1

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    @property
    def lif_params(self) -> LifParams:
        return LifParams(self.alpha.data, self.beta.data, self.u_th.data)

    def out_len(self, L: int) -> int:
        return conv_out_len(L, self.kernel, self.stride, self.pad)

    def named_params(self) -> dict:
        return {
            f"{self.name}.weight": self.weight,
            f"{self.name}.bias": self.bias,
            f"{self.name}.alpha": self.alpha,
            f"{self.name}.beta": self.beta,
            f"{self.name}.u_th": self.u_th,
        }


@dataclass
class Readout:
    """Convolution to one channel integrated by non-spiking leaky neurons."""

    name: str
    weight: Tensor
    bias: Tensor
    beta: Tensor

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def named_params(self) -> dict:
        return {
            f"{self.name}.weight": self.weight,
            f"{self.name}.bias": self.bias,
            f"{self.name}.beta": self.beta,
        }


def nearest_upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(x, 2, axis=-1)


def trailing_crop(x: np.ndarray, length: int) -> np.ndarray:
    if not 0 < length <= x.shape[-1]:
        raise ValueError(f"cannot crop length {x.shape[-1]} to {length}")
    return x[..., :length]


def _batch(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 2 else (x, False)


def _lif_layer_step(drive, layer: SpikingConv, state):
    if state is None:
        state = LifState.zeros(drive.shape, dtype=drive.dtype)
    if state.U.shape != drive.shape:
        raise ValueError(f"state shape {state.U.shape} does not match layer output {drive.shape}")
    return lif_step(state, layer.lif_params, drive)


def encoder_layer_forward(in_feats, layer: SpikingConv, state: LifState | None = None):
    """One timestep of an encoder layer: ``(C_in, L)`` features -> ``(C_out, L')`` spikes.

    A leading batch axis is allowed.  For the first layer ``in_feats`` is the
    normalised LPS frame itself, so the layer performs direct encoding.
    """
    x, single = _batch(in_feats)
    drive = conv1d_forward(x, layer.weight.data, layer.bias.data, layer.stride, layer.pad)
    if single:
        drive = drive[0]
    state, spikes = _lif_layer_step(drive, layer, state)
    return spikes, state


def decoder_layer_forward(in_spikes, skip_spikes, layer: SpikingConv, state: LifState | None = None):
    """Upsample x2, crop to the skip length, concatenate ``[upsampled, skip]`` and fire."""
    x, single = _batch(in_spikes)
    skip, _ = _batch(skip_spikes)
    L, Ls = x.shape[-1], skip.shape[-1]
    if Ls not in (2 * L, 2 * L - 1):
        raise ValueError(f"skip length {Ls} incompatible with input length {L} (need {2 * L} or {2 * L - 1})")
    up = trailing_crop(nearest_upsample2(x), Ls)
    cat = np.concatenate([up, skip], axis=1)
    drive = conv1d_forward(cat, layer.weight.data, layer.bias.data, 1, layer.pad)
    if single:
        drive = drive[0]
    state, spikes = _lif_layer_step(drive, layer, state)
    return spikes, state


def readout_forward(in_spikes, layer: Readout, state: np.ndarray | None = None):
    """One timestep of the readout; returns ``(output, new_membrane)`` with output length L."""
    x, single = _batch(in_spikes)
    drive = conv1d_forward(x, layer.weight.data, layer.bias.data, 1, (layer.kernel - 1) // 2)[:, 0]
    if single:
        drive = drive[0]
    if state is None:
        state = np.zeros_like(drive)
    if state.shape != drive.shape:
        raise ValueError(f"readout state {state.shape} does not match drive {drive.shape}")
    u = layer.beta.data[0] * state + drive
    return u, u


# ---------------------------------------------------------------------------
# spike accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynapseSpec:
    """How a receiving conv layer reads spikes out of the record.

    ``sources`` lists ``(layer name, upsampled)`` in channel-concatenation
    order; upsampled sources are repeated x2 and trailing-cropped to
    ``length`` before the convolution.
    """

    sources: tuple
    length: int
    kernel: int
    stride: int
    c_out: int


@dataclass
class SpikeRecord:
    """Binary spikes per spiking layer, each shaped ``(T, C, L)``."""

    spikes: dict = field(default_factory=dict)
    synapses: dict = field(default_factory=dict)

    @property
    def timesteps(self) -> int:
        return next(iter(self.spikes.values())).shape[0] if self.spikes else 0

    def conv_input(self, target: str) -> np.ndarray:
        spec = self.synapses[target]
        parts = []
        for name, upsampled in spec.sources:
            s = self.spikes[name]
            if upsampled:
                s = trailing_crop(nearest_upsample2(s), spec.length)
            parts.append(s)
        return np.concatenate(parts, axis=-2)


@dataclass
class SpikeStats:
    rates: dict
    synops: dict
    timesteps: int

    @property
    def total_synops(self) -> int:
        return int(sum(self.synops.values()))

    @property
    def mean_rate(self) -> float:
        return float(np.mean(list(self.rates.values()))) if self.rates else 0.0

    def table(self) -> str:
        lines = ["layer\tfiring_rate\tsynops"]
        names = list(self.rates) + [n for n in self.synops if n not in self.rates]
        for n in names:
            rate = f"{self.rates[n]:.6f}" if n in self.rates else "-"
            lines.append(f"{n}\t{rate}\t{self.synops.get(n, 0)}")
        lines.append(f"total\t{self.mean_rate:.6f}\t{self.total_synops}")
        return "\n".join(lines)


def fanout_per_position(length: int, kernel: int, stride: int) -> np.ndarray:
    """Number of output positions each (zero-padded) input position reaches."""
    pad = (kernel - 1) // 2
    L_out = conv_out_len(length, kernel, stride, pad)
    fan = np.zeros(length, dtype=np.int64)
    for j in range(L_out):
        lo = max(0, j * stride - pad)
        hi = min(length, j * stride - pad + kernel)
        fan[lo:hi] += 1
    return fan


def spike_stats(record: SpikeRecord) -> SpikeStats:
    """Firing rate of every spiking layer and synaptic operations into every conv layer.

    One synaptic operation is one spike crossing one weight; interior
    positions fan out to ``kernel * c_out / stride`` synapses, edge positions
    fewer because of the zero padding.
    """
    rates = {}
    for name, s in record.spikes.items():
        s = np.asarray(s)
        if not np.all((s == 0) | (s == 1)):
            raise SpikeIntegrityError(f"layer {name}: spike record is not binary")
        T = s.shape[0]
        neurons = int(np.prod(s.shape[1:]))
        rates[name] = float(np.sum(s, dtype=np.int64)) / (neurons * T) if T and neurons else 0.0
    synops = {}
    for target, spec in record.synapses.items():
        x = record.conv_input(target)
        per_pos = x.reshape(-1, x.shape[-1]).sum(axis=0, dtype=np.int64)
        fan = fanout_per_position(spec.length, spec.kernel, spec.stride)
        synops[target] = int(per_pos @ fan) * spec.c_out
    return SpikeStats(rates, synops, record.timesteps)
