"""Configuration, weight-file I/O, metric export and the CLI.

Weight files are plain JSON with explicit shapes in the header: the base
matrix D, the shear W, and per-layer raw scalars plus CNN tensors.  The
synthesized codebook is reconstructed on load, never stored.  Metrics go
to a fixed-schema CSV; every CLI run writes its resolved configuration
alongside the outputs.
"""

import argparse
import dataclasses
import json
import os
import pathlib
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import feel_sim
from .decoder import (
    CNN_HIDDEN,
    CNN_IN,
    CNN_KERNEL,
    CNN_OUT,
    DecoderParams,
    LayerParams,
)
from .ura_codebook import BaseMatrix, ShearMatrix, coherence_stats, init_base, synthesize

WEIGHT_FILE_VERSION = 1

METRIC_COLUMNS = ("snr_db", "round", "test_acc", "ka_mae", "frag_recovery", "sigma2_hat")
METRIC_UNITS = ("dB", "count", "ratio", "count", "ratio", "variance")


@dataclass
class ExperimentConfig:
    """Desk-scale defaults: n=256 codewords of length 64, fragment size 20,
    7-13 active of 40 devices, 150 rounds."""

    snr_db: tuple = (0.0, 3.0, 5.0, 10.0, 15.0, 20.0)
    mode: str = "baseline"
    rounds: int = 150
    seed: int = 0
    n: int = 256
    codeword_len: int = 64
    frag_len: int = 20
    ka_min: int = 7
    ka_max: int = 13
    devices: int = 40
    test_count: int = 297
    iid_fraction: float = 0.2
    shard_labels: int = 2
    hidden: int = 72
    local_steps: int = 10
    local_lr: float = 0.2
    local_batch: int = 16
    global_lr: float = 1.0
    kmeans_iters: int = 100
    codebook_scheme: str = "gaussian"
    sigma2_override: float | None = None
    record_device_updates: bool = False
    collect_val_rounds: int = 8
    collect_test_rounds: int = 8
    weights_path: str | None = None
    dataset_dir: str | None = None
    out_dir: str | None = None

    def validate(self):
        if self.mode not in ("pa", "baseline", "learnt"):
            raise ValueError(f"config field 'mode' must be pa|baseline|learnt, got {self.mode!r}")
        positive = ("rounds", "n", "codeword_len", "frag_len", "devices", "hidden",
                    "local_steps", "local_batch", "kmeans_iters")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"config field {name!r} must be >= 1")
        if not (1 <= self.ka_min <= self.ka_max <= self.devices):
            raise ValueError("config fields 'ka_min'/'ka_max' must satisfy 1 <= ka_min <= ka_max <= devices")
        if not 0.0 <= self.iid_fraction <= 1.0:
            raise ValueError("config field 'iid_fraction' must lie in [0, 1]")
        if len(self.snr_db) == 0:
            raise ValueError("config field 'snr_db' must list at least one SNR point")
        paths = [p for p in (self.weights_path, self.dataset_dir, self.out_dir) if p]
        if len(paths) != len(set(paths)):
            raise ValueError("config fields 'weights_path'/'dataset_dir'/'out_dir' must be distinct")
        if self.mode == "learnt" and not self.weights_path:
            raise ValueError("config field 'weights_path' is required in learnt mode")
        return self

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config field(s): {sorted(unknown)}")
        if "snr_db" in raw:
            raw["snr_db"] = tuple(float(s) for s in raw["snr_db"])
        return cls(**raw)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["snr_db"] = list(self.snr_db)
        return d


def _as_array(obj, shape, name):
    arr = np.asarray(obj, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ValueError(f"shape mismatch: {name} is {arr.shape}, header declares {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite entries in {name}")
    return arr


_SCALAR_FIELDS = ("gamma_raw", "eta_raw", "alpha_raw", "tau_raw", "rho_raw",
                  "sk_raw", "spi_raw", "ssig_raw")


def save_weights(path, D, W, layers, mode="learnt", k_max=32, extra=None):
    """Write a weight file: header, D, W, per-layer scalars + CNN tensors."""
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
                **{name: float(getattr(p, name)) for name in _SCALAR_FIELDS},
                "conv1_w": p.conv1_w.tolist(),
                "conv1_b": p.conv1_b.tolist(),
                "conv2_w": p.conv2_w.tolist(),
                "conv2_b": p.conv2_b.tolist(),
            }
            for p in layers
        ],
    }
    if extra:
        payload["extra"] = extra
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(payload, f)
    os.replace(tmp, path)
    return path


def load_weights(path):
    """Load a weight file; returns (codebook, base, shear, decoder_params).

    All invariants are validated before anything is returned, so a bad
    file never yields partial state.
    """
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as err:
        raise ValueError(f"corrupt weight file {path}: {err}") from err
    if payload.get("version") != WEIGHT_FILE_VERSION:
        raise ValueError(
            f"version mismatch: file declares {payload.get('version')!r}, expected {WEIGHT_FILE_VERSION}"
        )
    n, d, t_layers = payload["n"], payload["d"], payload["t_layers"]
    cnn = payload["cnn"]
    if (cnn["in"], cnn["hidden"], cnn["out"], cnn["kernel"]) != (CNN_IN, CNN_HIDDEN, CNN_OUT, CNN_KERNEL):
        raise ValueError(f"shape mismatch: cnn header {cnn} unsupported")
    D = _as_array(payload["D"], (n, d), "D")
    W = _as_array(payload["W"], (d, d), "W")
    if len(payload["layers"]) != t_layers:
        raise ValueError(
            f"shape mismatch: layers has {len(payload['layers'])} entries, header declares {t_layers}"
        )
    layers = []
    for i, entry in enumerate(payload["layers"]):
        layers.append(
            LayerParams(
                **{name: float(entry[name]) for name in _SCALAR_FIELDS},
                conv1_w=_as_array(entry["conv1_w"], (CNN_HIDDEN, CNN_IN, CNN_KERNEL), f"layers[{i}].conv1_w"),
                conv1_b=_as_array(entry["conv1_b"], (CNN_HIDDEN,), f"layers[{i}].conv1_b"),
                conv2_w=_as_array(entry["conv2_w"], (CNN_OUT, CNN_HIDDEN, CNN_KERNEL), f"layers[{i}].conv2_w"),
                conv2_b=_as_array(entry["conv2_b"], (CNN_OUT,), f"layers[{i}].conv2_b"),
            )
        )
    base = BaseMatrix(D, payload.get("extra", {}).get("init_scheme", "gaussian"))
    shear = ShearMatrix(W)
    codebook = synthesize(base, shear)
    params = DecoderParams(
        layers=tuple(layers), mode=payload.get("mode", "learnt"), k_max=payload.get("k_max")
    )
    return codebook, base, shear, params


def write_metrics_csv(path, rows):
    """Fixed-schema metrics CSV; a '#' comment line documents the units."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(METRIC_COLUMNS) + "\n")
        f.write("# units: " + ",".join(METRIC_UNITS) + "\n")
        for row in rows:
            f.write(",".join(repr(float(row[c])) if c != "round" else str(int(row[c]))
                             for c in METRIC_COLUMNS) + "\n")
    return path


def _metric_rows(snr, metrics):
    rows = []
    for i in range(len(metrics["round"])):
        rows.append({
            "snr_db": snr,
            "round": metrics["round"][i],
            "test_acc": metrics["test_acc"][i],
            "ka_mae": metrics["ka_mae"][i],
            "frag_recovery": metrics["frag_recovery"][i],
            "sigma2_hat": metrics["sigma2_hat"][i],
        })
    return rows


def _write_provenance(out_dir, cfg):
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.json", "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)


def _worker_count():
    raw = os.environ.get("AIRFEEL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def cmd_simulate(cfg):
    cfg.validate()
    if not cfg.out_dir:
        raise ValueError("config field 'out_dir' is required for simulate")
    _write_provenance(cfg.out_dir, cfg)
    codebook = decoder_params = None
    if cfg.mode == "learnt":
        codebook, _, _, decoder_params = load_weights(cfg.weights_path)

    def one(snr):
        sim = feel_sim.FeelSimulation(cfg, snr, cfg.mode, codebook=codebook,
                                      decoder_params=decoder_params)
        _, metrics = sim.run()
        return snr, metrics

    workers = min(_worker_count(), len(cfg.snr_db))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(one, cfg.snr_db))
    else:
        results = dict(one(s) for s in cfg.snr_db)
    rows = []
    for snr in cfg.snr_db:  # fixed order regardless of worker scheduling
        rows.extend(_metric_rows(snr, results[snr]))
    path = pathlib.Path(cfg.out_dir) / "metrics.csv"
    write_metrics_csv(path, rows)
    print(f"wrote {path}")
    return 0


def cmd_collect(cfg):
    cfg.validate()
    if not cfg.dataset_dir:
        raise ValueError("config field 'dataset_dir' is required for collect")
    _write_provenance(cfg.dataset_dir, cfg)
    paths = feel_sim.collect_dataset(cfg, cfg.dataset_dir)
    for name, p in paths.items():
        print(f"wrote {name}: {p}")
    return 0


def load_bench_samples(dataset_dir, split="test"):
    """Read (round, ka, pi, x) samples from a collected dataset split."""
    path = pathlib.Path(dataset_dir) / f"{split}.jsonl"
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())
        samples = [json.loads(line) for line in f]
    return header, samples


def decode_bench(cfg, dataset_dir, snr_db, weights_path=None, max_samples=400, split="test"):
    """Decoder-only recovery sweep over codebook/ordering configurations.

    Rows: fixed {gaussian, bernoulli, data_driven_pinv} x {ordering, none}
    plus, when a weight file is given, the learnt codebook x {ordering,
    none}.  Recovery accuracy is the exact count-vector match rate on
    samples drawn from a collected dataset split.
    """
    from .channel import noise_variance
    from .decoder import decode_batch, decoder_prior

    header, samples = load_bench_samples(dataset_dir, split)
    samples = samples[:max_samples]
    n, d = header["n"], header["d"]
    X = np.array([s["x"] for s in samples], dtype=np.float64)
    Pi = np.array([s["pi"] for s in samples], dtype=np.float64)
    Ka = np.array([s["ka"] for s in samples], dtype=np.float64)
    ka_nominal = int(round((cfg.ka_min + cfg.ka_max) / 2))

    # Calibration fragments for the data-driven init: codeword-length
    # fragments of a short perfect-aggregation run.
    calib = _calibration_fragments(cfg, d)

    setups = []
    for scheme in ("gaussian", "bernoulli", "data_driven_pinv"):
        base = init_base(n, d, scheme, (cfg.seed, 7), fragments=calib)
        cb = synthesize(base, ShearMatrix.identity(d))
        setups.append(("fixed", scheme, cb, DecoderParams.baseline()))
    if weights_path:
        cb, base, _, params = load_weights(weights_path)
        setups.append(("learnt", base.init_scheme, cb, params))

    rng_perm = np.random.default_rng(np.random.SeedSequence((cfg.seed, 11)))
    perm = rng_perm.permutation(n)
    rows = []
    for label, scheme, cb, params in setups:
        for ordering in (True, False):
            if ordering:
                Xb, pi0 = X, decoder_prior(Pi)
            else:
                Xb, pi0 = X[:, perm], np.full((X.shape[0], n), 1.0 / n)
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 12)))
            sigma = np.sqrt(noise_variance(snr_db, 1, d) * Ka)[:, None]
            Y = Xb @ cb.C + rng.standard_normal((Xb.shape[0], d)) * sigma
            sigma2_0 = noise_variance(snr_db, ka_nominal, d)
            decoded, k_hats, _ = decode_batch(Y, cb, pi0, params, sigma2_0)
            acc = float(np.mean(np.all(decoded == Xb.astype(np.int64), axis=1)))
            ka_mae = float(np.mean(np.abs(k_hats - Ka)))
            rows.append({
                "codebook": label, "init": scheme,
                "ordering": "popularity" if ordering else "none",
                "accuracy": acc, "ka_mae": ka_mae,
            })
    return rows


def _calibration_fragments(cfg, d, rounds=3):
    """Codeword-length update fragments from a short PA run."""
    from .quantizer import fragment

    small = dataclasses.replace(cfg, rounds=rounds, record_device_updates=True)
    sim = feel_sim.FeelSimulation(small, snr_db=None, mode="pa")
    frags = []
    for t in range(rounds):
        rec = sim.run_round(t)
        for _, (delta, _q) in sorted(rec.device_updates.items()):
            frags.append(fragment(delta, d))
    return np.vstack(frags)


def cmd_decode_bench(cfg, snr_db, out_dir):
    cfg.validate()
    if not cfg.dataset_dir:
        raise ValueError("config field 'dataset_dir' is required for decode-bench")
    rows = decode_bench(cfg, cfg.dataset_dir, snr_db, weights_path=cfg.weights_path)
    if out_dir:
        _write_provenance(out_dir, cfg)
        path = pathlib.Path(out_dir) / "decode_bench.csv"
        with open(path, "w", encoding="utf-8") as f:
            f.write("codebook,init,ordering,accuracy,ka_mae\n")
            f.write("# units: label,label,label,ratio,count\n")
            for r in rows:
                f.write(f"{r['codebook']},{r['init']},{r['ordering']},"
                        f"{r['accuracy']!r},{r['ka_mae']!r}\n")
        print(f"wrote {path}")
    for r in rows:
        print(f"{r['codebook']:>7} {r['init']:>17} {r['ordering']:>10} "
              f"accuracy={r['accuracy']:.3f} ka_mae={r['ka_mae']:.3f}")
    return 0


def cmd_codebook_stats(cfg):
    if not cfg.weights_path:
        raise ValueError("config field 'weights_path' is required for codebook-stats")
    codebook, _, _, _ = load_weights(cfg.weights_path)
    report = coherence_stats(codebook)
    for name in ("max_cross_corr", "mean_cross_corr", "top_max_cross_corr",
                 "top_mean_cross_corr", "sigma_max", "sigma_min", "sigma_ratio"):
        print(f"{name} = {getattr(report, name):.6f}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(prog="airfeel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "collect", "decode-bench", "codebook-stats"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--snr", type=str, default=None, help="comma-separated SNR list in dB")
        p.add_argument("--mode", type=str, default=None, choices=["pa", "baseline", "learnt"])
        p.add_argument("--weights", type=str, default=None, help="weight file path")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--rounds", type=int, default=None)
        p.add_argument("--data", type=str, default=None, help="dataset directory")
    return parser


def run_cli(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
        if args.snr is not None:
            cfg.snr_db = tuple(float(s) for s in args.snr.split(","))
        if args.mode is not None:
            cfg.mode = args.mode
        if args.weights is not None:
            cfg.weights_path = args.weights
        if args.out is not None:
            cfg.out_dir = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.rounds is not None:
            cfg.rounds = args.rounds
        if args.data is not None:
            cfg.dataset_dir = args.data
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "collect":
            if cfg.dataset_dir is None and cfg.out_dir is not None:
                cfg.dataset_dir = cfg.out_dir
                cfg.out_dir = None
            return cmd_collect(cfg)
        if args.command == "decode-bench":
            snr = cfg.snr_db[0]
            return cmd_decode_bench(cfg, snr, cfg.out_dir)
        if args.command == "codebook-stats":
            return cmd_codebook_stats(cfg)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run_cli())
