"""Produce an untrained weight file: data-driven base matrix from a short
perfect-aggregation calibration run, identity shear, Bayesian-equivalent
layer scalars and a zero-output CNN.  This is the starting point the
offline trainer loads, and it is also directly usable by the decoder
(it then behaves like the Bayesian layer stack).

Run: python3 demos/05_make_init_weights.py [out.json]
"""

import sys

import numpy as np

from airfeel import ExperimentConfig, FeelSimulation, LayerParams, fragment, save_weights
from airfeel.decoder import inv_softplus

out_path = sys.argv[1] if len(sys.argv) > 1 else "init_weights.json"
cfg = ExperimentConfig(record_device_updates=True)
n, d, t_layers = cfg.n, cfg.codeword_len, 10

# Calibration: codeword-length fragments of real update vectors.
sim = FeelSimulation(cfg, snr_db=None, mode="pa")
frags = []
for t in range(3):
    rec = sim.run_round(t)
    for _, (delta, _) in sorted(rec.device_updates.items()):
        frags.append(fragment(delta, d))
frags = np.vstack(frags)
print(f"calibration fragments: {frags.shape}")

from airfeel import init_base

base = init_base(n, d, "data_driven_pinv", seed=cfg.seed, fragments=frags)

rng = np.random.default_rng(cfg.seed)
em_raw = float(np.log(0.3 / 0.7))
layers = []
for _ in range(t_layers):
    layers.append(LayerParams(
        gamma_raw=0.0,
        eta_raw=0.0,
        alpha_raw=inv_softplus(1.0),
        tau_raw=inv_softplus(1.0),
        rho_raw=float(np.log(0.85 / 0.15)),
        sk_raw=em_raw,
        spi_raw=em_raw,
        ssig_raw=em_raw,
        conv1_w=0.1 * rng.standard_normal((32, 6, 3)),
        conv1_b=np.zeros(32),
        conv2_w=np.zeros((1, 32, 3)),  # zero output: starts as the Bayesian decoder
        conv2_b=np.zeros(1),
    ))

save_weights(out_path, base.D, np.eye(d), layers, mode="learnt", k_max=32,
             extra={"init_scheme": "data_driven_pinv", "trained": False})
print(f"wrote {out_path}")
