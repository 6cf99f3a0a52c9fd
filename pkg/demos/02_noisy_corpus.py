"""
Synthetic noisy corpus
======================

Token transcripts expand into feature frames; noise is mixed in at an
exact SNR. Test conditions share transcripts so only the noise level moves.
"""

import numpy as np

from alakd.data import CorpusSpec, build_splits, measured_snr, mix_at_snr, noise_source, synthesize_clean

spec = CorpusSpec(num_train=200, num_test=3, num_test_noise_only=2, seed=1)

clean = synthesize_clean([4, 9, 12], spec, seed=3)
print("3 tokens ->", clean.shape, "frames")

noise = noise_source("babble", clean.shape, seed=5, spec=spec)
for snr in (-10, 0, 10):
    noisy = mix_at_snr(clean, noise, snr)
    print(f"asked for {snr:+d} dB, measured {measured_snr(clean, noisy):+.6f} dB")

splits = build_splits(spec)
train = splits["train"]
print(len(train), "train utterances,", sum(u.is_noise_only for u in train), "noise-only")
snrs = np.array([u.snr_db for u in train if not u.is_noise_only])
print(f"train SNRs span [{snrs.min():.2f}, {snrs.max():.2f}] dB")

# same transcript at every test condition
for snr, utts in splits["test"].items():
    print("clean" if snr is None else f"{snr:+g} dB", utts[0].tokens)
