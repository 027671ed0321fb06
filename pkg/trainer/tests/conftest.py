import json
import pathlib

import numpy as np
import pytest

PRIMARY_ROOT = pathlib.Path(__file__).resolve().parents[2]


def write_synth_dataset(out_dir, n=16, d=8, rounds=(3, 2, 2), samples_per_round=6, seed=0):
    """Small synthetic dataset in the collected-data format."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    profile = 1.0 / (np.arange(n) + 1.0) ** 1.2
    profile /= profile.sum()
    header = {"version": 1, "n": n, "d": d, "fragment_count": samples_per_round}
    t = 0
    for name, n_rounds in zip(("train", "val", "test"), rounds):
        with open(out / f"{name}.jsonl", "w", encoding="utf-8") as f:
            f.write(json.dumps(header) + "\n")
            for _ in range(n_rounds):
                pi = profile + rng.uniform(0, 0.01, n)
                pi = np.sort(pi / pi.sum())[::-1]
                for _ in range(samples_per_round):
                    ka = int(rng.integers(2, 5))
                    x = np.bincount(rng.choice(n, ka, p=pi), minlength=n)
                    f.write(json.dumps({
                        "round": t, "ka": ka,
                        "pi": [float(p) for p in pi],
                        "x": x.tolist(),
                    }) + "\n")
                t += 1
    return out


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    return write_synth_dataset(tmp_path_factory.mktemp("synth_ds"))
