"""Training loop: random segments -> forward -> LSD -> BPTT -> Adam."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data
from .engine import AdamState, Tape, adam_step, lsd_loss
from .metrics import lsd_metric
from .model import Model, ModelConfig, build_unet, forward_utterance, save_checkpoint

log = logging.getLogger(__name__)

LOG_HEADER = "epoch\ttrain_lsd\tval_lsd\tsteps\n"


class TrainingError(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Everything a training run needs; defaults are the full training recipe."""

    clean_dir: str | None = None
    noisy_dir: str | None = None
    out: str = "runs/default"
    epochs: int = 60
    batch: int = 32
    lr: float = 0.002
    beta1: float = 0.5
    beta2: float = 0.9
    seed: int = 0
    segment_frames: int = data.DEFAULT_SEGMENT
    detach_reset: bool = True
    surrogate_width: float = 1.0
    val_fraction: float = 0.05
    norm_cap: int = 500
    micro_batch: int = 8
    max_utterances: int = 0
    overfit_steps: int = 0
    model_config: str | None = None

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def model_cfg(self) -> ModelConfig:
        base = ModelConfig()
        if self.model_config:
            base = ModelConfig.from_text(Path(self.model_config).read_text())
        return ModelConfig(
            bins=base.bins,
            encoder=base.encoder,
            decoder=base.decoder,
            readout_kernel=base.readout_kernel,
            surrogate_width=self.surrogate_width,
            detach_reset=self.detach_reset,
            relax=base.relax,
        )


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def batch_gradients(model: Model, noisy: np.ndarray, clean: np.ndarray, micro_batch: int = 8):
    """Mean LSD over a ``(B, T, K)`` batch and its gradients, accumulated micro-batch by micro-batch."""
    B = noisy.shape[0]
    params = model.named_params()
    acc = {name: np.zeros(t.shape) for name, t in params.items()}
    total = 0.0
    for a in range(0, B, micro_batch):
        x = np.ascontiguousarray(noisy[a : a + micro_batch].transpose(1, 0, 2))
        y = np.ascontiguousarray(clean[a : a + micro_batch].transpose(1, 0, 2))
        weight = x.shape[1] / B
        with Tape() as tape:
            est, _ = model.forward(x)
            loss = lsd_loss(est, y)
        grads = tape.backward(loss)
        for name, t in params.items():
            g = grads.get(t)
            if g is not None:
                acc[name] += weight * g
        total += weight * float(loss.data)
    model.zero_grad()
    return total, {name: g.astype(params[name].dtype) for name, g in acc.items()}


def train_step(model: Model, noisy, clean, adam: AdamState, cfg: RunConfig) -> float:
    loss, grads = batch_gradients(model, noisy, clean, cfg.micro_batch)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite training loss {loss} at optimizer step {adam.step + 1}")
    adam_step(model.param_arrays(), grads, adam, cfg.lr, cfg.beta1, cfg.beta2)
    return loss


def validate(model: Model, pairs, loader) -> float:
    if not pairs:
        return math.nan
    scores = []
    for pair in pairs:
        noisy, clean = loader(pair)
        est, _ = forward_utterance(model, noisy)
        scores.append(lsd_metric(clean, est))
    return float(np.mean(scores))


def overfit(model: Model, noisy_lps: np.ndarray, clean_lps: np.ndarray, steps: int = 500,
            cfg: RunConfig | None = None, stop_ratio: float | None = None):
    """Repeatedly fit one whole utterance; returns the per-step loss history.

    With ``stop_ratio`` set, stops once the loss falls to that fraction of
    the first step's loss.
    """
    cfg = cfg or RunConfig()
    adam = AdamState()
    history = []
    for _ in range(steps):
        history.append(train_step(model, noisy_lps[None], clean_lps[None], adam, cfg))
        if stop_ratio is not None and history[-1] <= stop_ratio * history[0]:
            break
    return history


def train(cfg: RunConfig, loader: data.LpsLoader | None = None) -> dict:
    """Run a full training job; writes ``last.ckpt``, ``best.ckpt``, ``train_log.tsv``."""
    if not cfg.clean_dir or not cfg.noisy_dir:
        raise data.DatasetError("both clean and noisy directories are required")
    for name in ("epochs", "batch", "segment_frames", "micro_batch"):
        if getattr(cfg, name) < 1:
            raise ValueError(f"{name} must be >= 1, got {getattr(cfg, name)}")
    if not cfg.lr > 0:
        raise ValueError(f"lr must be positive, got {cfg.lr}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    loader = loader or data.LpsLoader()
    manifest = data.scan_dataset(cfg.clean_dir, cfg.noisy_dir)
    if cfg.max_utterances:
        manifest = data.DatasetManifest(manifest.pairs[: cfg.max_utterances], manifest.unmatched)
    if cfg.overfit_steps:
        return _train_overfit(cfg, manifest, loader, out)
    train_set, val_set = data.split_train_val(manifest, cfg.val_fraction, cfg.seed)
    log.info("%d training / %d validation utterances (%.2f h)", len(train_set), len(val_set), manifest.hours)
    norm = data.compute_norm_stats(train_set.pairs, cfg.norm_cap, loader)
    model = build_unet(cfg.model_cfg(), seed=cfg.seed, norm=norm)
    adam = AdamState()
    log_path = out / "train_log.tsv"
    log_path.write_text(LOG_HEADER)
    timing = out / "timing.tsv"
    timing.write_text("epoch\twall_seconds\n")
    best = math.inf
    result = {}
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses, weights = [], []
        for batch in data.make_batches(train_set.pairs, _epoch_seed(cfg.seed, epoch), cfg.batch,
                                       cfg.segment_frames, loader):
            losses.append(train_step(model, batch.noisy, batch.clean, adam, cfg))
            weights.append(len(batch))
        train_lsd = float(np.average(losses, weights=weights))
        val_lsd = validate(model, val_set.pairs, loader)
        score = val_lsd if math.isfinite(val_lsd) else train_lsd
        meta = {"epoch": epoch}
        save_checkpoint(model, out / "last.ckpt", adam, cfg.seed, meta)
        if score < best:
            best = score
            save_checkpoint(model, out / "best.ckpt", adam, cfg.seed, meta)
        with log_path.open("a") as f:
            f.write(f"{epoch}\t{train_lsd:.6f}\t{val_lsd:.6f}\t{adam.step}\n")
        with timing.open("a") as f:
            f.write(f"{epoch}\t{time.perf_counter() - t0:.3f}\n")
        log.info("epoch %d: train LSD %.4f, val LSD %.4f", epoch, train_lsd, val_lsd)
        result = {"epoch": epoch, "train_lsd": train_lsd, "val_lsd": val_lsd, "best": best}
    result["model"] = model
    return result


def _train_overfit(cfg: RunConfig, manifest, loader, out: Path) -> dict:
    pair = manifest.pairs[0]
    noisy, clean = loader(pair)
    norm = data.compute_norm_stats([pair], None, loader)
    model = build_unet(cfg.model_cfg(), seed=cfg.seed, norm=norm)
    history = overfit(model, noisy, clean, cfg.overfit_steps, cfg)
    with (out / "overfit_log.tsv").open("w") as f:
        f.write("step\ttrain_lsd\n")
        for i, v in enumerate(history, 1):
            f.write(f"{i}\t{v:.6f}\n")
    save_checkpoint(model, out / "last.ckpt", seed=cfg.seed, meta={"steps": len(history)})
    log.info("overfit %s: LSD %.4f -> %.4f in %d steps", pair.id, history[0], history[-1], len(history))
    return {"history": history, "model": model, "utterance": pair.id}
