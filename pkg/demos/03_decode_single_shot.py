"""One fragment slot end to end: devices pick codewords, the channel
superposes them with noise, the decoder recovers the integer counts.

Run: python3 demos/03_decode_single_shot.py [snr_db]
"""

import sys

import numpy as np

from airfeel import (
    ActivityVector,
    ChannelConfig,
    DecoderParams,
    ShearMatrix,
    decode,
    init_base,
    noise_variance,
    synthesize,
    transmit,
)

snr_db = float(sys.argv[1]) if len(sys.argv) > 1 else 10.0
n, d, k_a = 256, 64, 10

codebook = synthesize(init_base(n, d, "gaussian", seed=0), ShearMatrix.identity(d))

# ten devices pick codewords under a popularity profile, with collisions
rng = np.random.default_rng(7)
profile = 1.0 / (np.arange(n) + 1.0) ** 1.1
profile /= profile.sum()
x = ActivityVector(np.bincount(rng.choice(n, k_a, p=profile), minlength=n))
print(f"true activity ({k_a} devices):",
      {int(i): int(x.x[i]) for i in np.flatnonzero(x.x)})

y = transmit(x, codebook, ChannelConfig(snr_db=snr_db, seed=1))
params = DecoderParams.baseline()
decoded, k_hat, diag = decode(
    y, codebook, profile, params, sigma2_0=noise_variance(snr_db, k_a, d)
)
print(f"decoded   at {snr_db:.0f} dB:        ",
      {int(i): int(decoded.x[i]) for i in np.flatnonzero(decoded.x)})
print(f"device-count estimate: {k_hat:.2f} (true {k_a})")
print(f"exact recovery: {np.array_equal(decoded.x, x.x)}")
print("residual trajectory:", " ".join(f"{r:.2f}" for r in diag.residual_norms[::5]))
