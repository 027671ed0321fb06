import dataclasses

import numpy as np
import pytest

from airfeel.harness import ExperimentConfig


def tiny_config(**overrides):
    """A few-second configuration for pipeline-level tests."""
    base = dict(
        snr_db=(10.0,),
        rounds=3,
        seed=0,
        n=32,
        codeword_len=16,
        frag_len=8,
        ka_min=2,
        ka_max=4,
        devices=8,
        test_count=97,
        hidden=8,
        local_steps=2,
        local_batch=8,
        kmeans_iters=25,
        collect_val_rounds=1,
        collect_test_rounds=1,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def pa_fragments_len4():
    """Codeword-length-4 update fragments from a short PA run."""
    from airfeel.feel_sim import FeelSimulation
    from airfeel.quantizer import fragment

    cfg = tiny_config(record_device_updates=True, rounds=2)
    sim = FeelSimulation(cfg, snr_db=None, mode="pa")
    frags = []
    for t in range(2):
        rec = sim.run_round(t)
        for _, (delta, _) in sorted(rec.device_updates.items()):
            frags.append(fragment(delta, 4))
    return np.vstack(frags)
