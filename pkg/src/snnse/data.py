"""Paired noisy/clean corpus: scanning, splitting, LPS extraction, batching, statistics."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import container, dsp
from .model import NormalizationStats

log = logging.getLogger(__name__)

CACHE_ENV = "SNNSE_CACHE_DIR"
DEFAULT_SEGMENT = 126
DEFAULT_BATCH = 32


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class UtterancePair:
    id: str
    clean: Path
    noisy: Path
    duration: float


@dataclass
class DatasetManifest:
    pairs: list
    unmatched: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def hours(self) -> float:
        return sum(p.duration for p in self.pairs) / 3600.0


def _wav_duration(path: Path) -> float:
    import wave

    try:
        with wave.open(str(path), "rb") as wf:
            return wf.getnframes() / wf.getframerate()
    except (wave.Error, EOFError) as exc:
        raise dsp.WavFormatError(f"{path}: {exc}") from exc


def scan_dataset(clean_dir, noisy_dir) -> DatasetManifest:
    """Pair ``*.wav`` files across two directories by filename stem."""
    clean_dir, noisy_dir = Path(clean_dir), Path(noisy_dir)
    for d in (clean_dir, noisy_dir):
        if not d.is_dir():
            raise DatasetError(f"not a directory: {d}")
    clean = {p.stem: p for p in clean_dir.glob("*.wav")}
    noisy = {p.stem: p for p in noisy_dir.glob("*.wav")}
    common = sorted(clean.keys() & noisy.keys())
    unmatched = sorted(noisy[s].name for s in noisy.keys() - clean.keys())
    unmatched += sorted(clean[s].name for s in clean.keys() - noisy.keys())
    if not common:
        raise DatasetError(f"no matching clean/noisy WAV pairs in {clean_dir} and {noisy_dir}")
    if unmatched:
        log.warning("%d unmatched files skipped: %s", len(unmatched), ", ".join(unmatched[:10]))
    pairs = [UtterancePair(s, clean[s], noisy[s], _wav_duration(noisy[s])) for s in common]
    return DatasetManifest(pairs, unmatched)


def split_train_val(manifest: DatasetManifest, val_fraction: float = 0.05, seed: int = 0):
    """Random utterance-level split; returns ``(train, val)`` manifests."""
    if not 0 < val_fraction < 1:
        raise DatasetError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(manifest.pairs)
    n_val = int(round(n * val_fraction))
    if n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    else:
        n_val = 0
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [p for i, p in enumerate(manifest.pairs) if i not in val_idx]
    val = [p for i, p in enumerate(manifest.pairs) if i in val_idx]
    return DatasetManifest(train), DatasetManifest(val)


class LpsLoader:
    """Computes (noisy LPS, clean LPS) pairs as float32 ``(frames, bins)`` arrays.

    Results are memoised in memory and, when a cache directory is given (or
    ``$SNNSE_CACHE_DIR`` is set), on disk keyed by file content and STFT
    geometry.
    """

    def __init__(self, cfg: dsp.StftConfig = dsp.StftConfig(), cache_dir=None, memory: bool = True):
        self.cfg = cfg
        cache_dir = cache_dir if cache_dir is not None else os.environ.get(CACHE_ENV)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.memory = memory
        self._memo = {}

    def lps(self, path) -> np.ndarray:
        path = Path(path)
        key = None
        if self.cache_dir is not None:
            digest = hashlib.sha1(path.read_bytes()).hexdigest()
            key = self.cache_dir / f"{digest}_{self.cfg.frame_len}_{self.cfg.hop_len}.lps"
            if key.exists():
                try:
                    return container.read_container(key)["lps"]
                except container.ContainerError:
                    log.warning("ignoring unreadable cache entry %s", key)
        w = dsp.load_16k(path)
        if len(w) < self.cfg.frame_len:
            w = dsp.Waveform(dsp.fit_length(w.samples, self.cfg.frame_len), w.sample_rate)
        out = dsp.lps_from_magnitude(dsp.stft(w, self.cfg).magnitude).astype(np.float32)
        if key is not None:
            container.write_container(key, {"lps": out})
        return out

    def __call__(self, pair: UtterancePair):
        hit = self._memo.get(pair.id)
        if hit is not None:
            return hit
        noisy, clean = self.lps(pair.noisy), self.lps(pair.clean)
        m = min(len(noisy), len(clean))
        out = (noisy[:m], clean[:m])
        if self.memory:
            self._memo[pair.id] = out
        return out


@dataclass
class Batch:
    noisy: np.ndarray  # (B, T, K)
    clean: np.ndarray  # (B, T, K)
    ids: list
    starts: list

    def __len__(self):
        return len(self.ids)


def crop_or_pad(lps: np.ndarray, start: int, length: int) -> np.ndarray:
    seg = lps[start : start + length]
    if len(seg) < length:
        fill = np.full((length - len(seg), lps.shape[1]), dsp.LOG_FLOOR, dtype=lps.dtype)
        seg = np.concatenate([seg, fill])
    return seg


def make_batches(pairs, epoch_seed: int, batch_size: int = DEFAULT_BATCH, segment: int = DEFAULT_SEGMENT,
                 loader: LpsLoader | None = None) -> Iterator[Batch]:
    """Shuffle utterances and cut one random ``segment``-frame crop from each.

    Shorter utterances are padded at ``ln(1e-10)``.  The stream depends only
    on ``epoch_seed`` and the order of ``pairs``.
    """
    pairs = list(pairs)
    loader = loader or LpsLoader()
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(len(pairs))
    for a in range(0, len(order), batch_size):
        noisy, clean, ids, starts = [], [], [], []
        for i in order[a : a + batch_size]:
            pair = pairs[i]
            n, c = loader(pair)
            m = len(n)
            start = int(rng.integers(0, m - segment + 1)) if m >= segment else 0
            noisy.append(crop_or_pad(n, start, segment))
            clean.append(crop_or_pad(c, start, segment))
            ids.append(pair.id)
            starts.append(start)
        yield Batch(np.stack(noisy), np.stack(clean), ids, starts)


def lps_moments(arrays) -> tuple:
    """Population mean and std over every cell of the given arrays (two passes, float64)."""
    arrays = list(arrays)
    count = sum(a.size for a in arrays)
    if count == 0:
        raise DatasetError("no LPS cells")
    mean = sum(float(np.sum(a, dtype=np.float64)) for a in arrays) / count
    var = sum(float(np.sum((a.astype(np.float64) - mean) ** 2)) for a in arrays) / count
    return mean, float(np.sqrt(var))


def compute_norm_stats(pairs, cap: int | None = None, loader: LpsLoader | None = None) -> NormalizationStats:
    """Scalar mean/std over every noisy-LPS cell of the first ``cap`` utterances by id."""
    pairs = sorted(pairs, key=lambda p: p.id)
    if not pairs:
        raise DatasetError("cannot compute normalisation statistics of an empty set")
    if cap is not None:
        pairs = pairs[:cap]
    loader = loader or LpsLoader()
    mean, std = lps_moments(loader(p)[0] for p in pairs)
    if std <= 1e-6:
        raise DatasetError(f"degenerate LPS statistics: std={std:.3g}")
    return NormalizationStats(mean, std)
