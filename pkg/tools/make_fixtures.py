"""Export decoder forward-pass fixtures for cross-implementation checks.

Writes fixtures/decoder_forward.json: a handful of received vectors with
the engine's relaxed (pre-projection) estimates under a given weight file.
Any reimplementation of the forward pass can check itself against these.

Run: python3 tools/make_fixtures.py [weights] [out]
"""

import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from airfeel.channel import noise_variance
from airfeel.decoder import decode
from airfeel.harness import load_weights


def main():
    weights = sys.argv[1] if len(sys.argv) > 1 else "fixtures/desk_weights.json"
    out = sys.argv[2] if len(sys.argv) > 2 else "fixtures/decoder_forward.json"
    codebook, _, _, params = load_weights(weights)
    n, d = codebook.n, codebook.d

    rng = np.random.default_rng(2024)
    profile = 1.0 / (np.arange(n) + 1.0) ** 1.1
    profile /= profile.sum()
    cases = []
    for snr in (0.0, 5.0, 10.0, 20.0, 15.0, 3.0):
        ka = int(rng.integers(7, 14))
        x = np.bincount(rng.choice(n, ka, p=profile), minlength=n)
        sigma2 = noise_variance(snr, ka, d)
        y = x @ codebook.C + rng.normal(0.0, np.sqrt(sigma2), d)
        sigma2_0 = noise_variance(snr, 10, d)
        _, k_hat, diag = decode(y, codebook, profile, params, sigma2_0=sigma2_0)
        cases.append({
            "snr_db": snr,
            "y": y.tolist(),
            "pi0": profile.tolist(),
            "sigma2_0": sigma2_0,
            "x_hat_relaxed": diag.x_hat_relaxed.tolist(),
            "k_hat": k_hat,
        })
    payload = {"weights": str(weights), "n": n, "d": d, "cases": cases}
    with open(out, "w", encoding="utf-8") as f:
        json.dump(payload, f)
    print(f"wrote {out} ({len(cases)} cases against {weights})")


if __name__ == "__main__":
    main()
