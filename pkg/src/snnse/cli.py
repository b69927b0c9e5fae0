"""Command-line entry points: ``train``, ``enhance``, ``evaluate``, ``spike-stats``.

Settings come from (highest precedence first) command-line flags, a flat
``key=value`` file given with ``--config``, then the built-in defaults.
Every failure is reported on stderr as one line ``error: <kind>: <message>``
and a non-zero exit status.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import container, data, dsp
from .layers import spike_stats
from .metrics import evaluate_set, identity_enhancer, model_enhancer
from .model import ConfigError, enhance_waveform, load_checkpoint, parse_bool, parse_key_values
from .training import RunConfig, TrainingError, train

log = logging.getLogger("snnse")

_ERROR_KINDS = (
    (data.DatasetError, "dataset"),
    (container.ChecksumError, "checkpoint"),
    (container.ContainerError, "checkpoint"),
    (dsp.WavFormatError, "format"),
    (dsp.UnsupportedRateError, "rate"),
    (ConfigError, "config"),
    (TrainingError, "numeric"),
    (FloatingPointError, "numeric"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
    (ValueError, "value"),
)


def _add_train(sub):
    p = sub.add_parser("train", help="train a model on a clean/noisy corpus")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--clean-dir")
    p.add_argument("--noisy-dir")
    p.add_argument("--out", help="output directory for checkpoints and logs")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--segment-frames", type=int)
    p.add_argument("--detach-reset", type=parse_bool, metavar="BOOL")
    p.add_argument("--surrogate-width", type=float)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--norm-cap", type=int, help="utterances used for normalisation statistics")
    p.add_argument("--micro-batch", type=int, help="batch elements per forward/backward pass")
    p.add_argument("--max-utterances", type=int, help="use only the first N pairs (0 = all)")
    p.add_argument("--overfit-steps", type=int, help="fit the first utterance for N steps instead")
    p.add_argument("--model-config", help="ModelConfig key=value file")


def _add_enhance(sub):
    p = sub.add_parser("enhance", help="enhance one WAV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input")
    p.add_argument("--out", required=True)


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="score a test set and export enhanced WAVs")
    p.add_argument("--checkpoint")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--noisy-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bypass-model", action="store_true", help="identity enhancer (noisy baseline)")


def _add_spike_stats(sub):
    p = sub.add_parser("spike-stats", help="per-layer firing rates and synaptic operations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input")
    p.add_argument("--out", help="also write the table here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snnse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)
    _add_enhance(sub)
    _add_evaluate(sub)
    _add_spike_stats(sub)
    return parser


def run_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the optional config file and command-line flags."""
    values = {}
    types = {f.name: f.type for f in fields(RunConfig)}
    if args.config:
        for key, raw in parse_key_values(Path(args.config).read_text()).items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"{args.config}: unknown setting {key!r}")
            values[key] = _coerce(RunConfig.__dataclass_fields__[key].default, raw)
    for key in types:
        val = getattr(args, key, None)
        if val is not None:
            values[key] = val
    return RunConfig(**values)


def _coerce(default, raw: str):
    if isinstance(default, bool):
        return parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def cmd_train(args) -> int:
    cfg = run_config(args)
    result = train(cfg)
    if "history" in result:
        h = result["history"]
        print(f"overfit {result['utterance']}: LSD {h[0]:.4f} -> {h[-1]:.4f} ({len(h)} steps)")
    else:
        print(f"trained {result['epoch']} epochs: train LSD {result['train_lsd']:.4f}, "
              f"val LSD {result['val_lsd']:.4f}; checkpoints in {cfg.out}")
    return 0


def cmd_enhance(args) -> int:
    model = load_checkpoint(args.checkpoint)
    w = dsp.read_wav(args.input)
    out, _ = enhance_waveform(model, w)
    dsp.write_wav(out, args.out)
    print(f"wrote {args.out} ({len(out)} samples at 16 kHz)")
    return 0


def cmd_evaluate(args) -> int:
    manifest = data.scan_dataset(args.clean_dir, args.noisy_dir)
    if args.bypass_model:
        enhancer, source = identity_enhancer, "bypass"
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --bypass-model is given")
        enhancer, source = model_enhancer(load_checkpoint(args.checkpoint)), args.checkpoint
    out = Path(args.out)
    report = evaluate_set(enhancer, manifest.pairs, out / "enhanced", config={"model": source})
    report.write(out / "report.tsv")
    print(report.summary())
    return 1 if report.failures else 0


def cmd_spike_stats(args) -> int:
    model = load_checkpoint(args.checkpoint)
    _, record = enhance_waveform(model, dsp.read_wav(args.input))
    table = spike_stats(record).table()
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    return 0


COMMANDS = {
    "train": cmd_train,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "spike-stats": cmd_spike_stats,
}


def _kind(exc: BaseException) -> str:
    for cls, kind in _ERROR_KINDS:
        if isinstance(exc, cls):
            return kind
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        if args.verbose:
            log.exception("command failed")
        msg = str(exc).replace("\n", " ")
        print(f"error: {_kind(exc)}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
