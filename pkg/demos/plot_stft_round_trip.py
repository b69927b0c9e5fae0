"""
STFT analysis, log-power spectra and resynthesis
=================================================

The enhancer works on 512-point frames with a 256-sample hop and a
periodic Hann window.  This walk-through checks that the analysis and
overlap-add synthesis invert each other, then goes through the log-power
representation the network actually sees.
"""

import numpy as np

from snnse import dsp

rng = np.random.default_rng(0)
cfg = dsp.StftConfig()
print("bins per frame:", cfg.n_bins)

# one second of noise at 16 kHz
x = rng.uniform(-1, 1, 16000)
spec = dsp.stft(x, cfg)
print("spectrogram shape (frames, bins):", spec.shape)

# overlap-add synthesis; the first and last frame are only half covered
y = dsp.istft(spec).samples
interior = slice(cfg.frame_len, len(y) - cfg.frame_len)
print("max interior reconstruction error: %.2e" % np.max(np.abs(y[interior] - x[interior])))

###############################################################################
# Log-power spectra
# -----------------
# Magnitudes become ``ln(max(|X|^2, 1e-10))``.  The floor keeps silent bins
# finite: an all-zero frame maps to ln(1e-10), about -23.03.

lps = dsp.lps_from_magnitude(spec.magnitude)
print("LPS range: %.2f .. %.2f" % (lps.min(), lps.max()))
print("silence maps to", dsp.lps_from_magnitude(np.zeros(3)))

###############################################################################
# Reconstruction with the noisy phase
# -----------------------------------
# Enhancement only estimates magnitudes.  Putting the unmodified magnitude
# back on the noisy phase returns the original signal.

back = dsp.reconstruct(dsp.magnitude_from_lps(lps), spec)
print("phase-reuse error: %.2e" % np.max(np.abs(back.samples[interior] - x[interior])))

###############################################################################
# Resampling from 48 kHz
# ----------------------
# The corpus ships at 48 kHz.  A 241-tap Kaiser low-pass followed by
# keeping every third sample brings it to 16 kHz.

t = np.arange(48000) / 48000
for f in (1000, 7000, 9000, 23000):
    w = dsp.resample_to_16k(dsp.Waveform(np.sin(2 * np.pi * f * t), 48000))
    rms = np.sqrt(np.mean(w.samples[400:-400] ** 2))
    print("%5d Hz sine -> RMS %.2e (%.1f dB re 1/sqrt(2))" % (f, rms, 20 * np.log10(rms * np.sqrt(2) + 1e-300)))
