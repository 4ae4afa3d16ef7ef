#!/usr/bin/env python3
"""Model discovery from a measured angular-velocity CSV (waterwheel-style data).

Usage: angular_velocity_run.py measurement.csv [outdir]

The CSV must hold a uniformly sampled scalar series (time,value rows, as
written by `delaysindy simulate`). Uses a degree-3 library and a 32-sample
delay window, the settings that work for wheel-like rotation data.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from delaysindy.cli import main as cli_main

if len(sys.argv) < 2:
    sys.exit(__doc__)
csv_path = sys.argv[1]
out = sys.argv[2] if len(sys.argv) > 2 else "runs/angular_velocity"

sys.exit(cli_main([
    "train",
    "--input", csv_path,
    "--degree", "3",
    "--n", "32",
    "--p", "10",
    "--m", "3",
    "--mode", "random",
    "--epochs", "150",
    "--pretrain-epochs", "30",
    "--stlsq-threshold", "24.0",
    "--stlsq-normalize", "true",
    "--lambda4", "0.05",
    "--out", out,
]))
