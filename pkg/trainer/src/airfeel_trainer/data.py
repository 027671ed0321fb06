"""Dataset loading: line-delimited JSON samples grouped into round blocks."""

import json
import pathlib

import numpy as np
import torch


def load_split(dataset_dir, split):
    """Read one split; returns (header, rounds) where rounds is a list of
    dicts with stacked tensors for all samples of one federated round."""
    path = pathlib.Path(dataset_dir) / f"{split}.jsonl"
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())
        samples = [json.loads(line) for line in f]
    if header.get("version") != 1:
        raise ValueError(f"unsupported dataset version {header.get('version')!r}")
    by_round = {}
    for s in samples:
        by_round.setdefault(s["round"], []).append(s)
    rounds = []
    for t in sorted(by_round):
        block = by_round[t]
        rounds.append({
            "round": t,
            "x": torch.tensor(np.array([b["x"] for b in block], dtype=np.float64)),
            "pi": torch.tensor(np.array([b["pi"] for b in block], dtype=np.float64)),
            "ka": torch.tensor(np.array([b["ka"] for b in block], dtype=np.float64)),
        })
    return header, rounds


def flatten_rounds(rounds):
    """Concatenate round blocks into one big tensor triple."""
    x = torch.cat([r["x"] for r in rounds])
    pi = torch.cat([r["pi"] for r in rounds])
    ka = torch.cat([r["ka"] for r in rounds])
    return x, pi, ka
