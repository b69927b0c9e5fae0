import numpy as np
import pytest

from conftest import SMALL, TINY
from snnse.layers import (
    SpikeIntegrityError,
    SpikeRecord,
    fanout_per_position,
    nearest_upsample2,
    readout_forward,
    spike_stats,
    trailing_crop,
)
from snnse.model import build_unet, forward_utterance


def brute_force_synops(record: SpikeRecord, model) -> dict:
    """Walk every output position and kernel tap; count presynaptic spikes that hit a real weight."""
    counts = {}
    layers = {l.name: l for l in list(model.encoders[1:]) + list(model.decoders)}
    layers[model.readout.name] = model.readout
    for target, spec in record.synapses.items():
        parts = []
        for name, up in spec.sources:
            s = record.spikes[name]
            if up:
                s = np.repeat(s, 2, axis=-1)[..., : spec.length]
            parts.append(s)
        x = np.concatenate(parts, axis=1)  # (T, C, L)
        T, C, L = x.shape
        k, stride = spec.kernel, spec.stride
        pad = (k - 1) // 2
        c_out = layers[target].weight.shape[0]
        total = 0
        for t in range(T):
            for j in range((L + 2 * pad - k) // stride + 1):
                for tap in range(k):
                    i = j * stride - pad + tap
                    if 0 <= i < L:
                        total += int(x[t, :, i].sum()) * c_out
        counts[target] = total
    return counts


def test_upsample_and_crop():
    x = np.array([[1, 2, 3]])
    assert np.array_equal(nearest_upsample2(x), [[1, 1, 2, 2, 3, 3]])
    assert np.array_equal(trailing_crop(nearest_upsample2(x), 5), [[1, 1, 2, 2, 3]])


def test_fanout_interior_and_edges():
    # stride 1, kernel 3: every position reaches 3 outputs, none lost at the edge thanks to padding
    assert np.array_equal(fanout_per_position(6, 3, 1), [2, 3, 3, 3, 3, 2])
    # stride 2, kernel 5, length 9: output j covers inputs 2j-2 .. 2j+2, j = 0..4
    assert np.array_equal(fanout_per_position(9, 5, 2), [2, 2, 3, 2, 3, 2, 3, 2, 2])


@pytest.mark.parametrize("cfg", [TINY, SMALL], ids=["tiny", "small"])
def test_synops_match_brute_force(cfg):
    model = build_unet(cfg, seed=1)
    # lower thresholds so plenty of neurons fire
    for layer in list(model.encoders) + list(model.decoders):
        layer.u_th.data[:] = 0.3
    x = np.random.default_rng(0).normal(0, 2, (9, cfg.bins))
    _, rec = forward_utterance(model, x)
    stats = spike_stats(rec)
    assert stats.total_synops > 0
    assert stats.synops == brute_force_synops(rec, model)


def test_all_zero_record():
    model = build_unet(TINY, seed=0)
    _, rec = forward_utterance(model, np.zeros((5, TINY.bins)))
    for k in rec.spikes:
        rec.spikes[k] = np.zeros_like(rec.spikes[k])
    stats = spike_stats(rec)
    assert all(r == 0 for r in stats.rates.values())
    assert stats.total_synops == 0


def test_all_ones_record():
    model = build_unet(TINY, seed=0)
    _, rec = forward_utterance(model, np.zeros((5, TINY.bins)))
    for k in rec.spikes:
        rec.spikes[k] = np.ones_like(rec.spikes[k])
    stats = spike_stats(rec)
    assert all(r == 1 for r in stats.rates.values())
    # dense ladder: every in-range tap fires; TINY has enc2 (3ch len8 -> k3 s2), dec1 (4+3ch len8, k3), readout (3ch, k3)
    expected_enc2 = 5 * 3 * 4 * int(fanout_per_position(8, 3, 2).sum())
    expected_dec1 = 5 * 7 * 3 * int(fanout_per_position(8, 3, 1).sum())
    expected_ro = 5 * 3 * 1 * int(fanout_per_position(8, 3, 1).sum())
    assert stats.synops == {"enc2": expected_enc2, "dec1": expected_dec1, "readout": expected_ro}


def test_single_spike():
    model = build_unet(TINY, seed=0)
    _, rec = forward_utterance(model, np.zeros((3, TINY.bins)))
    for k in rec.spikes:
        rec.spikes[k] = np.zeros_like(rec.spikes[k])
    rec.spikes["enc1"][1, 0, 3] = 1  # feeds enc2 directly (4 ch, k3 s2) and dec1 as the skip
    stats = spike_stats(rec)
    # enc2: input 3 reaches outputs centred at 2 and 4 -> 2 taps x 4 channels
    # dec1: stride 1, interior -> 3 taps x 3 channels
    assert stats.synops == {"enc2": 8, "dec1": 9, "readout": 0}
    assert stats.rates["enc1"] == pytest.approx(1 / (3 * 3 * 8))


def test_non_binary_rejected():
    model = build_unet(TINY, seed=0)
    _, rec = forward_utterance(model, np.zeros((3, TINY.bins)))
    rec.spikes["enc2"] = rec.spikes["enc2"].astype(np.float32) + 0.5
    with pytest.raises(SpikeIntegrityError, match="enc2"):
        spike_stats(rec)


def test_table_format():
    model = build_unet(TINY, seed=0)
    _, rec = forward_utterance(model, np.random.default_rng(0).normal(0, 3, (4, TINY.bins)))
    lines = spike_stats(rec).table().splitlines()
    assert lines[0] == "layer\tfiring_rate\tsynops"
    assert lines[-1].startswith("total\t")
    for row in lines[1:-1]:
        name, rate, syn = row.split("\t")
        if rate != "-":
            assert 0.0 <= float(rate) <= 1.0
        assert int(syn) >= 0


def test_readout_leaky_integration():
    model = build_unet(TINY, seed=0, dtype=np.float64)
    r = model.readout
    r.weight.data[:] = 0.0
    r.bias.data[:] = 1.0
    r.beta.data[:] = 0.5
    state = None
    outs = []
    for _ in range(4):
        o, state = readout_forward(np.zeros((3, 8)), r, state)
        outs.append(float(o[0]))
    assert outs == pytest.approx([1.0, 1.5, 1.75, 1.875])
