"""Run every experiment at desk scale, one output directory per step.

    python scripts/run_pipeline.py --out runs/desk [--quick] [--only zone-volume,train]

``--quick`` shrinks draws, subsets and epochs so the whole pipeline finishes
in a few minutes; the numbers are then only a smoke test.
"""

import argparse
import sys
import time
from pathlib import Path

from nsad.cli import main as nsad

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"

STEPS = [
    ("zero-table", ["zero-table", "--precision", "32"]),
    ("zero-table-tied", ["zero-table", "--precision", "32", "--x", "1.4,1.4,1.4,1.4"]),
    ("variation-hist-b32", ["variation-hist", "--precision", "32"]),
    ("variation-hist-b64", ["variation-hist", "--precision", "64"]),
    ("thresholds-b32", ["thresholds", "--precision", "32"]),
    ("zone-volume", ["zone-volume", "--sweep", "precision", "--sweep-values", "B16,B32,B64"]),
    ("zone-volume-batch", ["zone-volume", "--sweep", "batch_size", "--sweep-values", "32,64,128"]),
    ("train", ["train"]),
    ("weight-divergence", ["weight-divergence"]),
    ("beta-sweep", ["beta-sweep"]),
]

# smoke-test sizes per subcommand
QUICK = {
    "variation-hist": {"draws": 2, "subset": 256},
    "thresholds": {"draws": 2, "subset": 256},
    "zone-volume": {"draws": 2, "subset": 256},
    "train": {"subset": 256, "epochs": 1},
    "weight-divergence": {"subset": 256, "epochs": 1},
    "beta-sweep": {"subset": 256, "epochs": 1, "seeds": 0},
}


def argv_for(args, quick):
    extra = []
    if quick:
        extra = [a for k, v in QUICK.get(args[0], {}).items() for a in ("--set", f"{k}={v}")]
    return [*args, "--config", str(CONFIG), *extra]


def run():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--only", default="", help="comma-separated step names")
    a = p.parse_args()
    only = {s for s in a.only.split(",") if s}
    codes = {}
    for name, args in STEPS:
        if only and name not in only:
            continue
        argv = argv_for(args, a.quick) + ["--out", str(Path(a.out) / name)]
        print(f"== {name}: nsad {' '.join(argv)}", flush=True)
        t = time.time()
        codes[name] = nsad(argv)
        print(f"== {name}: exit {codes[name]} after {time.time() - t:.0f}s\n", flush=True)
    for name, code in codes.items():
        print(f"{name:22s} exit {code}")
    # divergence (4) is an experimental outcome, not a pipeline failure
    return 1 if any(c not in (0, 4) for c in codes.values()) else 0


if __name__ == "__main__":
    sys.exit(run())
