"""Audio I/O, resampling, STFT analysis/synthesis and log-power transforms."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

LPS_FLOOR = 1e-10
LOG_FLOOR = math.log(LPS_FLOOR)

_PCM_SCALE = 32768.0


class WavFormatError(ValueError):
    """Raised when a WAV file is not 16-bit PCM mono."""


class UnsupportedRateError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Frame/hop geometry; defaults are 32 ms frames and 16 ms hops at 16 kHz."""

    frame_len: int = 512
    hop_len: int = 256

    def __post_init__(self):
        n = self.frame_len
        if n < 2 or n & (n - 1):
            raise ValueError(f"frame_len must be a power of two, got {n}")
        if self.hop_len * 2 != n:
            raise ValueError(f"hop_len must be frame_len/2 ({n // 2}), got {self.hop_len}")

    @property
    def fft_len(self) -> int:
        return self.frame_len

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def window(self) -> np.ndarray:
        # periodic Hann: sums to exactly frame_len/2 and is COLA at hop = frame/2
        return signal.get_window("hann", self.frame_len, fftbins=True)

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.frame_len) // self.hop_len + 1


@dataclass
class ComplexSpectrogram:
    values: np.ndarray  # (frames, bins) complex
    config: StftConfig

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != self.config.n_bins:
            raise ValueError(
                f"spectrogram must be (frames, {self.config.n_bins}), got {self.values.shape}"
            )

    @property
    def shape(self):
        return self.values.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.values)

    @property
    def phasor(self) -> np.ndarray:
        """``values / |values|``, and 0 where a bin carries no energy (no phase to reuse)."""
        mag = self.magnitude
        out = np.zeros_like(self.values)
        np.divide(self.values, mag, out=out, where=mag > 0)
        return out


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except wave.Error as exc:
        msg = str(exc)
        if msg.startswith("unknown format"):
            raise WavFormatError(f"{path}: format={msg.split(':')[-1].strip()} (need PCM=1)") from exc
        raise WavFormatError(f"{path}: header: {msg}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: header: truncated") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: channels={channels} (need 1)")
    if width != 2:
        raise WavFormatError(f"{path}: bits_per_sample={8 * width} (need 16)")
    if len(raw) != 2 * n:
        raise WavFormatError(f"{path}: data: truncated ({len(raw)} of {2 * n} bytes)")
    ints = np.frombuffer(raw, dtype="<i2")
    return Waveform(ints.astype(np.float64) / _PCM_SCALE, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0 - 1.0 / _PCM_SCALE)
    return np.rint(x * _PCM_SCALE).astype("<i2")


def write_wav(w: Waveform, path) -> None:
    """Write 16-bit PCM mono; samples are clamped to [-1, 1 - 2**-15] and rounded."""
    ints = to_pcm16(w.samples)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(ints.tobytes())


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

RESAMPLER_TAPS = 241
RESAMPLER_BETA = 8.6
RESAMPLER_CUTOFF_HZ = 7200.0


def _decimation_filter() -> np.ndarray:
    return signal.firwin(
        RESAMPLER_TAPS, RESAMPLER_CUTOFF_HZ, window=("kaiser", RESAMPLER_BETA), fs=48000
    )


def resample_to_16k(w: Waveform) -> Waveform:
    """Low-pass (Kaiser windowed-sinc) then keep every third sample of a 48 kHz signal."""
    if w.sample_rate != 48000:
        raise UnsupportedRateError(f"sample_rate={w.sample_rate} (only 48000 -> 16000 supported)")
    h = _decimation_filter()
    delay = (len(h) - 1) // 2
    # zero-phase alignment: output sample n sits at input sample 3n
    y = signal.oaconvolve(w.samples, h, mode="full")[delay : delay + len(w.samples)]
    return Waveform(y[::3], 16000)


def load_16k(path) -> Waveform:
    """Read a WAV file and bring it to 16 kHz (48 kHz input is resampled)."""
    w = read_wav(path)
    if w.sample_rate == 16000:
        return w
    return resample_to_16k(w)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


def stft(w: Waveform | np.ndarray, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if len(x) < cfg.frame_len:
        raise ValueError(f"signal has {len(x)} samples, shorter than one frame ({cfg.frame_len})")
    m = cfg.n_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len)[:: cfg.hop_len][:m]
    return ComplexSpectrogram(np.fft.rfft(frames * cfg.window, n=cfg.fft_len, axis=-1), cfg)


def istft(s: ComplexSpectrogram, cfg: StftConfig | None = None, sample_rate: int = 16000) -> Waveform:
    """Weighted overlap-add, normalised by the overlapped squared-window sum."""
    cfg = s.config if cfg is None else cfg
    if cfg != s.config:
        raise ValueError(f"config mismatch: spectrogram {s.config} vs {cfg}")
    m = s.values.shape[0]
    win = cfg.window
    frames = np.fft.irfft(s.values, n=cfg.fft_len, axis=-1)[:, : cfg.frame_len] * win
    n = (m - 1) * cfg.hop_len + cfg.frame_len
    out = np.zeros(n)
    wsum = np.zeros(n)
    for i in range(m):
        a = i * cfg.hop_len
        out[a : a + cfg.frame_len] += frames[i]
        wsum[a : a + cfg.frame_len] += win**2
    nz = wsum > 1e-8
    out[nz] /= wsum[nz]
    out[~nz] = 0.0
    return Waveform(out, sample_rate)


# ---------------------------------------------------------------------------
# Log-power spectra
# ---------------------------------------------------------------------------


def lps_from_magnitude(mag: np.ndarray) -> np.ndarray:
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0):
        raise ValueError("magnitude must be non-negative")
    return np.log(np.maximum(mag * mag, LPS_FLOOR))


def magnitude_from_lps(lps: np.ndarray) -> np.ndarray:
    lps = np.asarray(lps, dtype=np.float64)
    if not np.all(np.isfinite(lps)):
        raise ValueError("LPS contains non-finite values")
    return np.sqrt(np.exp(lps))


def reconstruct(est_mag: np.ndarray, noisy: ComplexSpectrogram, cfg: StftConfig | None = None,
                sample_rate: int = 16000) -> Waveform:
    """Combine an estimated magnitude with the noisy phase and resynthesise.

    Bins where the noisy spectrum is exactly zero have no phase and stay silent.
    """
    if est_mag.shape != noisy.values.shape:
        raise ValueError(f"shape mismatch: magnitude {est_mag.shape} vs noisy {noisy.values.shape}")
    spec = est_mag * noisy.phasor
    return istft(ComplexSpectrogram(spec, noisy.config), cfg, sample_rate)


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - len(x), dtype=x.dtype)])
