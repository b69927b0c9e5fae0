"""U-Net spiking network over the frequency axis, one STFT frame per timestep."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import container, dsp
from .engine import (
    AdamState,
    SpikeConfig,
    Tape,
    Tensor,
    affine,
    clamp_named,
    concat,
    conv1d,
    conv_out_len,
    crop,
    leaky_integrator,
    lif,
    reshape,
    upsample2,
)
from .layers import Readout, SpikeRecord, SpikingConv, SynapseSpec
from .neuron import SurrogateConfig

CHECKPOINT_KIND = "snnse-checkpoint"

DEFAULT_ENCODER = (
    (32, 5, 1),
    (32, 5, 2),
    (64, 5, 2),
    (64, 5, 2),
    (128, 5, 2),
    (128, 5, 2),
    (256, 5, 2),
    (256, 5, 2),
)
DEFAULT_DECODER = ((256, 5), (128, 5), (128, 5), (64, 5), (64, 5), (32, 5), (32, 5))

WEIGHT_STD = 0.2
DECAY_MEAN = 0.05
THRESHOLD_MEAN = 1.0
NEURON_STD = 0.01


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NormalizationStats:
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not self.std > 0:
            raise ConfigError(f"normalisation std must be positive, got {self.std}")


@dataclass(frozen=True)
class ModelConfig:
    """Layer ladder and neuron settings.

    ``encoder`` holds ``(channels, kernel, stride)`` per layer and
    ``decoder`` holds ``(channels, kernel)``; decoder ``i`` is joined by the
    output of encoder ``n_enc - 1 - i`` (1-based), so there is always one
    decoder fewer than encoders.
    """

    bins: int = 257
    encoder: tuple = DEFAULT_ENCODER
    decoder: tuple = DEFAULT_DECODER
    readout_kernel: int = 5
    surrogate_width: float = 1.0
    detach_reset: bool = True
    relax: bool = False

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(tuple(int(v) for v in e) for e in self.encoder))
        object.__setattr__(self, "decoder", tuple(tuple(int(v) for v in d) for d in self.decoder))
        self.validate()

    @property
    def spike_config(self) -> SpikeConfig:
        return SpikeConfig(SurrogateConfig(self.surrogate_width), self.detach_reset, self.relax)

    def encoder_lengths(self) -> list:
        lengths, L = [], self.bins
        for _, k, s in self.encoder:
            L = conv_out_len(L, k, s, (k - 1) // 2)
            lengths.append(L)
        return lengths

    def decoder_lengths(self) -> list:
        enc = self.encoder_lengths()
        return [enc[len(enc) - 2 - i] for i in range(len(self.decoder))]

    def validate(self):
        if self.bins < 2:
            raise ConfigError(f"bins must be >= 2, got {self.bins}")
        if len(self.encoder) < 2:
            raise ConfigError("need at least two encoder layers")
        if len(self.decoder) != len(self.encoder) - 1:
            raise ConfigError(
                f"need {len(self.encoder) - 1} decoder layers for {len(self.encoder)} encoders, got {len(self.decoder)}"
            )
        for c, k, s in self.encoder:
            if c < 1 or k < 1 or k % 2 == 0 or s not in (1, 2):
                raise ConfigError(f"bad encoder spec {(c, k, s)}: need channels>=1, odd kernel, stride 1|2")
        for c, k in self.decoder:
            if c < 1 or k < 1 or k % 2 == 0:
                raise ConfigError(f"bad decoder spec {(c, k)}: need channels>=1, odd kernel")
        if self.readout_kernel < 1 or self.readout_kernel % 2 == 0:
            raise ConfigError(f"readout kernel must be odd, got {self.readout_kernel}")
        if not self.surrogate_width > 0:
            raise ConfigError("surrogate width must be positive")
        enc = self.encoder_lengths()
        if enc[-1] < 2 or any(b >= a for a, b in zip(enc, enc[1:])):
            raise ConfigError(f"invalid length ladder {enc}: must strictly decrease and end >= 2")
        if enc[0] != self.bins:
            raise ConfigError(f"first encoder layer must keep {self.bins} bins (stride 1), got {enc[0]}")
        L = enc[-1]
        for i, Ls in enumerate(self.decoder_lengths()):
            if Ls not in (2 * L, 2 * L - 1):
                raise ConfigError(f"decoder {i + 1}: skip length {Ls} cannot be reached by upsampling {L}")
            L = Ls

    def to_text(self) -> str:
        enc = ",".join(":".join(map(str, e)) for e in self.encoder)
        dec = ",".join(":".join(map(str, d)) for d in self.decoder)
        return "\n".join(
            [
                f"bins={self.bins}",
                f"encoder={enc}",
                f"decoder={dec}",
                f"readout_kernel={self.readout_kernel}",
                f"surrogate_width={self.surrogate_width!r}",
                f"detach_reset={str(self.detach_reset).lower()}",
                f"relax={str(self.relax).lower()}",
            ]
        ) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = parse_key_values(text)
        kw = {}
        for key, val in kv.items():
            if key == "bins" or key == "readout_kernel":
                kw[key] = int(val)
            elif key in ("encoder", "decoder"):
                kw[key] = tuple(tuple(int(v) for v in item.split(":")) for item in val.split(",") if item)
            elif key == "surrogate_width":
                kw[key] = float(val)
            elif key in ("detach_reset", "relax"):
                kw[key] = parse_bool(val)
            else:
                raise ConfigError(f"unknown model config key {key!r}")
        return cls(**kw)

    def param_count(self) -> int:
        """Closed-form number of trainable scalars."""
        n, c_prev = 0, 1
        enc_ch = []
        for c, k, _ in self.encoder:
            n += c * c_prev * k + 4 * c
            enc_ch.append(c)
            c_prev = c
        for i, (c, k) in enumerate(self.decoder):
            c_in = c_prev + enc_ch[len(enc_ch) - 2 - i]
            n += c * c_in * k + 4 * c
            c_prev = c
        return n + c_prev * self.readout_kernel + 2


def parse_bool(val: str) -> bool:
    v = str(val).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {val!r}")


def parse_key_values(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


class Model:
    def __init__(self, config: ModelConfig, encoders, decoders, readout, norm=NormalizationStats()):
        self.config = config
        self.encoders = list(encoders)
        self.decoders = list(decoders)
        self.readout = readout
        self.norm = norm

    @property
    def dtype(self):
        return self.readout.weight.dtype

    def named_params(self) -> dict:
        out = {}
        for layer in self.encoders + self.decoders + [self.readout]:
            out.update(layer.named_params())
        return out

    def param_arrays(self) -> dict:
        return {k: t.data for k, t in self.named_params().items()}

    def zero_grad(self):
        for t in self.named_params().values():
            t.grad = None

    def clamp(self):
        clamp_named(self.param_arrays())

    def astype(self, dtype) -> "Model":
        """Copy of the model with every parameter cast to ``dtype``."""
        arrays = {k: v.astype(dtype) for k, v in self.param_arrays().items()}
        return model_from_arrays(self.config, arrays, self.norm)

    def forward(self, noisy_lps, record=False):
        """Run the network on raw LPS shaped ``(T, B, K)``.

        Returns ``(est, spikes)``: ``est`` is a Tensor of raw (denormalised)
        LPS with the input's shape and ``spikes`` maps layer name to a
        ``(T, B, C, L)`` array (empty unless ``record``).
        """
        x = np.asarray(noisy_lps)
        if x.ndim != 3 or x.shape[2] != self.config.bins:
            raise ValueError(f"expected (T, B, {self.config.bins}) LPS, got {x.shape}")
        T, B, K = x.shape
        dtype = self.dtype
        cfg = self.config.spike_config
        norm = self.norm
        h = Tensor(((x - norm.mean) / norm.std).astype(dtype).reshape(T * B, 1, K))
        spikes = {}
        enc_out = []
        for layer in self.encoders:
            s = self._spiking(layer, h, T, B, layer.stride, cfg)
            enc_out.append(s)
            spikes[layer.name] = s
            h = reshape(s, (T * B,) + s.shape[2:])
        prev = enc_out[-1]
        for i, layer in enumerate(self.decoders):
            skip = enc_out[len(enc_out) - 2 - i]
            up = crop(upsample2(prev), skip.shape[-1])
            cat = concat([up, skip], axis=2)
            prev = self._spiking(layer, reshape(cat, (T * B,) + cat.shape[2:]), T, B, 1, cfg)
            spikes[layer.name] = prev
        r = self.readout
        drive = conv1d(reshape(prev, (T * B,) + prev.shape[2:]), r.weight, r.bias, 1)
        out = leaky_integrator(reshape(drive, (T, B, 1, K)), r.beta)
        est = affine(reshape(out, (T, B, K)), norm.std, norm.mean)
        return est, ({k: v.data for k, v in spikes.items()} if record else {})

    @staticmethod
    def _spiking(layer: SpikingConv, h, T, B, stride, cfg):
        drive = conv1d(h, layer.weight, layer.bias, stride)
        drive = reshape(drive, (T, B) + drive.shape[1:])
        return lif(drive, layer.alpha, layer.beta, layer.u_th, cfg)

    def synapse_specs(self) -> dict:
        """Conv geometry of every layer that receives spikes, for the SpikeRecord."""
        specs = {}
        enc_len = self.config.encoder_lengths()
        for i in range(1, len(self.encoders)):
            layer = self.encoders[i]
            specs[layer.name] = SynapseSpec(
                ((self.encoders[i - 1].name, False),), enc_len[i - 1], layer.kernel, layer.stride, layer.channels
            )
        prev = self.encoders[-1].name
        for i, layer in enumerate(self.decoders):
            skip = self.encoders[len(self.encoders) - 2 - i]
            specs[layer.name] = SynapseSpec(
                ((prev, True), (skip.name, False)), enc_len[len(enc_len) - 2 - i], layer.kernel, 1, layer.channels
            )
            prev = layer.name
        specs[self.readout.name] = SynapseSpec(((prev, False),), self.config.bins, self.readout.kernel, 1, 1)
        return specs


def forward_utterance(model: Model, noisy_lps) -> tuple:
    """Enhance one utterance: ``(M, K)`` raw noisy LPS -> ``((M, K)`` raw LPS, SpikeRecord)``.

    Layer state starts from zero on every call.
    """
    x = np.asarray(noisy_lps)
    if x.ndim != 2 or x.shape[1] != model.config.bins:
        raise ValueError(f"expected (frames, {model.config.bins}) LPS, got {x.shape}")
    est, spikes = model.forward(x[:, None, :], record=True)
    record = SpikeRecord(
        {k: v[:, 0].astype(np.uint8) for k, v in spikes.items()}, model.synapse_specs()
    )
    return est.data[:, 0, :].astype(np.float64), record


def _new_param(rng, shape, mean, std, dtype, name):
    return Tensor(rng.normal(mean, std, size=shape).astype(dtype), requires_grad=True, name=name)


def build_unet(cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32,
               norm: NormalizationStats = NormalizationStats()) -> Model:
    """Create a freshly initialised model.

    Conv weights ~ N(0, 0.2), biases 0, decays ~ N(0.05, 0.01) and
    thresholds ~ N(1.0, 0.01), clamped to their valid ranges.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    zeros = lambda n, name: Tensor(np.zeros(n, dtype=dtype), requires_grad=True, name=name)  # noqa: E731

    def spiking(name, c_out, c_in, k, stride):
        return SpikingConv(
            name,
            _new_param(rng, (c_out, c_in, k), 0.0, WEIGHT_STD, dtype, f"{name}.weight"),
            zeros(c_out, f"{name}.bias"),
            _new_param(rng, (c_out,), DECAY_MEAN, NEURON_STD, dtype, f"{name}.alpha"),
            _new_param(rng, (c_out,), DECAY_MEAN, NEURON_STD, dtype, f"{name}.beta"),
            _new_param(rng, (c_out,), THRESHOLD_MEAN, NEURON_STD, dtype, f"{name}.u_th"),
            stride,
        )

    encoders, c_prev = [], 1
    for i, (c, k, s) in enumerate(cfg.encoder, 1):
        encoders.append(spiking(f"enc{i}", c, c_prev, k, s))
        c_prev = c
    decoders = []
    for i, (c, k) in enumerate(cfg.decoder, 1):
        skip = encoders[len(encoders) - 1 - i]
        decoders.append(spiking(f"dec{i}", c, c_prev + skip.channels, k, 1))
        c_prev = c
    readout = Readout(
        "readout",
        _new_param(rng, (1, c_prev, cfg.readout_kernel), 0.0, WEIGHT_STD, dtype, "readout.weight"),
        zeros(1, "readout.bias"),
        _new_param(rng, (1,), DECAY_MEAN, NEURON_STD, dtype, "readout.beta"),
    )
    model = Model(cfg, encoders, decoders, readout, norm)
    model.clamp()
    return model


def model_from_arrays(cfg: ModelConfig, arrays: dict, norm: NormalizationStats) -> Model:
    """Rebuild a model around existing parameter arrays (copied)."""
    proto = build_unet(cfg, seed=0, dtype=next(iter(arrays.values())).dtype, norm=norm)
    params = proto.named_params()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ConfigError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, t in params.items():
        a = np.asarray(arrays[name])
        if a.shape != t.shape:
            raise ConfigError(f"{name}: shape {a.shape} != expected {t.shape}")
        t.data = a.copy()
    return proto


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: Model
    adam: AdamState | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)


def checkpoint_entries(model: Model, adam: AdamState | None = None, seed: int | None = None,
                       meta: dict | None = None) -> dict:
    entries = {
        "kind": container.text_entry(CHECKPOINT_KIND),
        "config": container.text_entry(model.config.to_text()),
        "norm/mean": np.float64(model.norm.mean),
        "norm/std": np.float64(model.norm.std),
    }
    for name, arr in model.param_arrays().items():
        entries[f"param/{name}"] = arr
    if seed is not None:
        entries["meta/seed"] = np.int64(seed)
    for key, val in (meta or {}).items():
        entries[f"meta/{key}"] = np.asarray(val)
    if adam is not None:
        entries["adam/step"] = np.int64(adam.step)
        for name in adam.m:
            entries[f"adam/m/{name}"] = adam.m[name]
            entries[f"adam/v/{name}"] = adam.v[name]
    return entries


def save_checkpoint(model: Model, path, adam: AdamState | None = None, seed: int | None = None,
                    meta: dict | None = None) -> None:
    container.write_container(path, checkpoint_entries(model, adam, seed, meta))


def _scalar(arr):
    return np.asarray(arr).reshape(-1)[0].item()


def read_checkpoint(path) -> Checkpoint:
    entries = container.read_container(path)
    if "kind" not in entries or container.entry_text(entries["kind"]) != CHECKPOINT_KIND:
        raise container.ContainerError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_text(container.entry_text(entries["config"]))
    norm = NormalizationStats(float(_scalar(entries["norm/mean"])), float(_scalar(entries["norm/std"])))
    arrays = {k[len("param/"):]: v for k, v in entries.items() if k.startswith("param/")}
    model = model_from_arrays(cfg, arrays, norm)
    adam = None
    if "adam/step" in entries:
        adam = AdamState(step=int(_scalar(entries["adam/step"])))
        for k, v in entries.items():
            if k.startswith("adam/m/"):
                adam.m[k[len("adam/m/"):]] = v
            elif k.startswith("adam/v/"):
                adam.v[k[len("adam/v/"):]] = v
    seed = int(_scalar(entries["meta/seed"])) if "meta/seed" in entries else None
    meta = {k[5:]: v for k, v in entries.items() if k.startswith("meta/") and k != "meta/seed"}
    return Checkpoint(model, adam, seed, meta)


def load_checkpoint(path) -> Model:
    return read_checkpoint(path).model


# ---------------------------------------------------------------------------
# end-to-end enhancement
# ---------------------------------------------------------------------------


def enhance_waveform(model: Model, w: dsp.Waveform, cfg: dsp.StftConfig = dsp.StftConfig()):
    """Waveform in, enhanced 16 kHz waveform out (same length as the 16 kHz input).

    Returns ``(waveform, SpikeRecord)``.
    """
    if w.sample_rate == 48000:
        w = dsp.resample_to_16k(w)
    elif w.sample_rate != 16000:
        raise dsp.UnsupportedRateError(f"sample_rate={w.sample_rate} (need 16000 or 48000)")
    n = len(w)
    x = w.samples if n >= cfg.frame_len else dsp.fit_length(w.samples, cfg.frame_len)
    spec = dsp.stft(x, cfg)
    est_lps, record = forward_utterance(model, dsp.lps_from_magnitude(spec.magnitude))
    out = dsp.reconstruct(dsp.magnitude_from_lps(est_lps), spec, cfg, 16000)
    return dsp.Waveform(dsp.fit_length(out.samples, n), 16000), record
