"""A small SNR sweep through the CLI machinery, writing the metrics CSV.

Run: python3 demos/06_snr_sweep.py [out_dir]
"""

import pathlib
import sys

from airfeel.harness import run_cli

out = sys.argv[1] if len(sys.argv) > 1 else "sweep_out"
code = run_cli([
    "simulate",
    "--mode", "baseline",
    "--snr", "5,15",
    "--rounds", "12",
    "--seed", "1",
    "--out", out,
])
print(f"exit code {code}")
print((pathlib.Path(out) / "metrics.csv").read_text()[:600])
