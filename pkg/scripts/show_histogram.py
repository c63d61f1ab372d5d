"""Print the log10 histogram of variation records as text bars.

    python scripts/show_histogram.py runs/desk/variation-hist-b32/records.csv [--width 0.5]
"""

import argparse
import csv

import numpy as np

from nsad.variation import log_histogram


def read_d(path):
    with open(path, newline="") as f:
        rows = [line for line in f if not line.startswith("#")]
    recs = list(csv.DictReader(rows))
    return np.array([float(r["d"]) for r in recs if r["nan"] == "0"])


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("records")
    p.add_argument("--width", type=float, default=0.5)
    p.add_argument("--bar", type=int, default=60, help="width of the longest bar")
    a = p.parse_args()
    d = read_d(a.records)
    edges, counts = log_histogram(d, a.width)
    print(f"{d.size} records, {int(np.sum(d == 0))} exactly zero")
    if counts.size == 0:
        return
    top = counts.max()
    for lo, c in zip(edges[:-1], counts):
        bar = "#" * int(round(a.bar * c / top))
        print(f"1e{lo:+.2f}  {c:6d}  {bar}")


if __name__ == "__main__":
    main()
