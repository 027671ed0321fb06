"""Command line: train on a collected dataset, evaluate a weight file."""

import argparse
import dataclasses
import json
import sys

from .train import TrainConfig, train


def _load_train_config(path):
    if path is None:
        return TrainConfig()
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
    return TrainConfig(**raw)


def run_cli(argv=None):
    parser = argparse.ArgumentParser(prog="airfeel-train", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train")
    t.add_argument("--data", required=True, help="dataset directory (train/val/test.jsonl)")
    t.add_argument("--out", required=True, help="output weight file")
    t.add_argument("--config", default=None, help="JSON TrainConfig overrides")
    t.add_argument("--init-weights", default=None, help="weight file to start from")
    t.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("evaluate")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--snr", default="0,5,10,20", help="comma-separated dB list")
    e.add_argument("--split", default="test")
    e.add_argument("--max-samples", type=int, default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            cfg = _load_train_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            train(args.data, args.out, cfg, init_weights=args.init_weights)
            return 0
        if args.command == "evaluate":
            from .evaluate import evaluate

            snrs = [float(s) for s in args.snr.split(",")]
            report = evaluate(args.weights, args.data, snrs, split=args.split,
                              max_samples=args.max_samples)
            for row in report:
                print(f"snr={row['snr_db']:>5.1f} dB  recovery={row['recovery_accuracy']:.3f}  "
                      f"support_f1={row['support_f1']:.3f}  ka_mae={row['ka_mae']:.3f}  "
                      f"({row['samples']} samples)")
            return 0
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
