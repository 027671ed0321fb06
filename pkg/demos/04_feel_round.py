"""A few federated rounds in perfect-aggregation mode vs the noisy uplink.

Run: python3 demos/04_feel_round.py
"""

from airfeel import ExperimentConfig, FeelSimulation

cfg = ExperimentConfig(rounds=10)

print("perfect aggregation (no channel):")
sim = FeelSimulation(cfg, snr_db=None, mode="pa")
_, metrics = sim.run(rounds=10)
print("  test accuracy:", " ".join(f"{a:.3f}" for a in metrics["test_acc"]))

print("\nnoisy uplink at 10 dB, un-learnt decoder:")
sim = FeelSimulation(cfg, snr_db=10.0, mode="baseline")
_, metrics = sim.run(rounds=10)
print("  test accuracy:", " ".join(f"{a:.3f}" for a in metrics["test_acc"]))
print("  fragment recovery:", " ".join(f"{a:.2f}" for a in metrics["frag_recovery"]))
print("  device-count MAE:", " ".join(f"{a:.2f}" for a in metrics["ka_mae"]))
