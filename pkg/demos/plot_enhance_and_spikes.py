"""
Enhancing a file and counting spikes
====================================

Enhancement runs the noisy log-power spectrum through the network one
frame per timestep, puts the estimated magnitude back on the noisy phase
and resynthesises.  The same pass records every spike, which gives
firing rates and synaptic operation counts per layer.
"""

import numpy as np

from snnse import dsp, synthetic
from snnse.data import lps_moments
from snnse.layers import spike_stats
from snnse.metrics import score_pair
from snnse.model import NormalizationStats, build_unet, enhance_waveform

rng = np.random.default_rng(3)
clean, noisy = synthetic.make_pair(1.5, rng, snr_db=5.0)
lps = dsp.lps_from_magnitude(dsp.stft(noisy).magnitude)

# an untrained full-size network; load_checkpoint(...) would give a trained one
model = build_unet(seed=0, norm=NormalizationStats(*lps_moments([lps])))
print("parameters:", model.config.param_count())

out, record = enhance_waveform(model, dsp.Waveform(noisy, 16000))
print("input %d samples -> output %d samples" % (len(noisy), len(out)))

row = score_pair(clean, noisy, out.samples)
print("LSD noisy %.2f, enhanced %.2f" % (row.lsd_noisy, row.lsd_enhanced))
print("SI-SNR noisy %.2f dB, enhanced %.2f dB" % (row.si_snr_noisy, row.si_snr_enhanced))

###############################################################################
# Spike statistics.  Synaptic operations count one per spike per weight it
# reaches; positions near the edges reach fewer weights because of padding.

stats = spike_stats(record)
print(stats.table())

###############################################################################
# Silence produces an all-zero spectrum with no phase to reuse, so the
# output is silent whatever the network estimates.

quiet, rec0 = enhance_waveform(model, dsp.Waveform(np.zeros(16000), 16000))
print("silent input -> output RMS %.1e, mean firing rate %.4f (speech: %.4f)"
      % (np.sqrt(np.mean(quiet.samples**2)), spike_stats(rec0).mean_rate, stats.mean_rate))
