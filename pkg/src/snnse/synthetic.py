"""Synthetic speech-like corpora for smoke tests, demos and desk-scale checks.

The signals are crude: glottal-pulse trains through two formant resonators,
gated into syllables, mixed with coloured noise at a chosen SNR.  They only
need enough spectro-temporal structure for a network to have something to
learn; they are no substitute for recorded speech.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import Waveform, write_wav


def _resonator(x, freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return signal.lfilter([1.0 - r], a, x)


def speech_like(duration: float, rng: np.random.Generator, fs: int = 16000) -> np.ndarray:
    n = int(round(duration * fs))
    out = np.zeros(n)
    pos = int(rng.uniform(0.02, 0.15) * fs)
    while pos < n:
        syl = int(rng.uniform(0.12, 0.35) * fs)
        seg = min(syl, n - pos)
        t = np.arange(seg) / fs
        f0 = rng.uniform(90, 230) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(2, 6) * t))
        phase = 2 * np.pi * np.cumsum(f0) / fs
        src = signal.sawtooth(phase) + 0.05 * rng.standard_normal(seg)
        f1, f2 = rng.uniform(300, 900), rng.uniform(900, 2600)
        voiced = _resonator(src, f1, 80, fs) + 0.6 * _resonator(src, f2, 120, fs)
        env = np.sin(np.pi * np.arange(seg) / max(syl, 1)) ** 2
        out[pos : pos + seg] += voiced * env
        pos += syl + int(rng.uniform(0.03, 0.25) * fs)
    peak = np.max(np.abs(out))
    return out / peak * 0.5 if peak > 0 else out


def noise_like(n: int, rng: np.random.Generator, fs: int = 16000) -> np.ndarray:
    kind = rng.integers(3)
    white = rng.standard_normal(n)
    if kind == 0:  # pink-ish
        b, a = [0.049922, -0.095993, 0.050612, -0.004408], [1, -2.494956, 2.017265, -0.522189]
        x = signal.lfilter(b, a, white)
    elif kind == 1:  # low-frequency rumble plus hum
        x = signal.lfilter([1.0], [1.0, -0.95], white) + 3 * np.sin(2 * np.pi * rng.uniform(50, 120) * np.arange(n) / fs)
    else:  # band-limited hiss
        sos = signal.butter(4, [rng.uniform(1000, 3000), 7000], btype="band", fs=fs, output="sos")
        x = signal.sosfilt(sos, white)
    return x / (np.std(x) + 1e-12)


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    p_clean = np.mean(clean**2)
    p_noise = np.mean(noise**2)
    return clean + noise * np.sqrt(p_clean / (p_noise * 10 ** (snr_db / 10)))


def make_pair(duration: float, rng: np.random.Generator, snr_db: float | None = None, fs: int = 16000):
    clean = speech_like(duration, rng, fs)
    snr = rng.choice([15.0, 10.0, 5.0, 0.0]) if snr_db is None else snr_db
    noisy = mix_at_snr(clean, noise_like(len(clean), rng, fs), snr)
    scale = min(1.0, 0.95 / max(np.max(np.abs(noisy)), 1e-12))
    return clean * scale, noisy * scale


def write_corpus(root, n_utterances: int, seed: int = 0, duration=(1.5, 3.0), fs: int = 16000):
    """Write ``root/clean/*.wav`` and ``root/noisy/*.wav`` with matching names."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for i in range(n_utterances):
        clean, noisy = make_pair(rng.uniform(*duration), rng, fs=fs)
        name = f"p{i % 7:03d}_{i:04d}.wav"
        write_wav(Waveform(clean, fs), root / "clean" / name)
        write_wav(Waveform(noisy, fs), root / "noisy" / name)
    return root / "clean", root / "noisy"
