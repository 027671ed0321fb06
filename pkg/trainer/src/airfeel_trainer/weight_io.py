"""Weight-file interchange: the JSON format shared with the decoding engine.

Header carries explicit shapes; payload holds the base matrix D, shear W,
and per-layer raw scalars plus CNN tensors.  Floats are written at full
precision so a round trip is exact.
"""

import json
import os

import numpy as np

WEIGHT_FILE_VERSION = 1
CNN_IN, CNN_HIDDEN, CNN_OUT, CNN_KERNEL = 6, 32, 1, 3

SCALAR_FIELDS = ("gamma_raw", "eta_raw", "alpha_raw", "tau_raw", "rho_raw",
                 "sk_raw", "spi_raw", "ssig_raw")


def _check(arr, shape, name):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ValueError(f"shape mismatch: {name} is {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite entries in {name}")
    return arr


def read_weight_file(path):
    """Parse and validate a weight file into plain numpy structures."""
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("version") != WEIGHT_FILE_VERSION:
        raise ValueError(f"version mismatch: {payload.get('version')!r}")
    n, d, t_layers = payload["n"], payload["d"], payload["t_layers"]
    D = _check(payload["D"], (n, d), "D")
    W = _check(payload["W"], (d, d), "W")
    layers = []
    for i, entry in enumerate(payload["layers"]):
        layers.append({
            **{k: float(entry[k]) for k in SCALAR_FIELDS},
            "conv1_w": _check(entry["conv1_w"], (CNN_HIDDEN, CNN_IN, CNN_KERNEL), f"layers[{i}].conv1_w"),
            "conv1_b": _check(entry["conv1_b"], (CNN_HIDDEN,), f"layers[{i}].conv1_b"),
            "conv2_w": _check(entry["conv2_w"], (CNN_OUT, CNN_HIDDEN, CNN_KERNEL), f"layers[{i}].conv2_w"),
            "conv2_b": _check(entry["conv2_b"], (CNN_OUT,), f"layers[{i}].conv2_b"),
        })
    if len(layers) != t_layers:
        raise ValueError("shape mismatch: layers count differs from header")
    return {
        "n": n, "d": d, "t_layers": t_layers,
        "k_max": payload.get("k_max", 32),
        "mode": payload.get("mode", "learnt"),
        "D": D, "W": W, "layers": layers,
        "extra": payload.get("extra", {}),
    }


def write_weight_file(path, D, W, layers, k_max=32, mode="learnt", extra=None):
    """Atomic export (write temp, rename)."""
    D = np.asarray(D, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    payload = {
        "version": WEIGHT_FILE_VERSION,
        "n": D.shape[0],
        "d": D.shape[1],
        "t_layers": len(layers),
        "cnn": {"in": CNN_IN, "hidden": CNN_HIDDEN, "out": CNN_OUT, "kernel": CNN_KERNEL},
        "mode": mode,
        "k_max": k_max,
        "D": D.tolist(),
        "W": W.tolist(),
        "layers": [
            {
                **{k: float(entry[k]) for k in SCALAR_FIELDS},
                "conv1_w": np.asarray(entry["conv1_w"]).tolist(),
                "conv1_b": np.asarray(entry["conv1_b"]).tolist(),
                "conv2_w": np.asarray(entry["conv2_w"]).tolist(),
                "conv2_b": np.asarray(entry["conv2_b"]).tolist(),
            }
            for entry in layers
        ],
    }
    if extra:
        payload["extra"] = extra
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f)
    os.replace(tmp, path)
    return path
