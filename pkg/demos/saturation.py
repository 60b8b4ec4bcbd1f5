"""How does transfer change as more sessions go into the soup?

Run from the repo root after a repro run (see flatness_surface.py)::

    python demos/saturation.py runs/desk

Reads saturation.csv and report.csv and prints one table per attack.
"""

import csv
import sys
from collections import defaultdict
from pathlib import Path

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/desk")

with open(out / "saturation.csv", newline="") as fh:
    rows = list(csv.DictReader(fh))

table = defaultdict(dict)
for r in rows:
    table[(r["attack"], r["mode"])][(int(r["m"]), r["target"])] = float(r["asr"])

for (kind, mode), cells in sorted(table.items()):
    sizes = sorted({m for m, _ in cells})
    targets = sorted({t for _, t in cells})
    print(f"\n{kind} {mode}: transfer % by soup size")
    print("  target " + "".join(f"{f'm={m}':>8}" for m in sizes))
    for t in targets:
        print(f"  {t:<6} " + "".join(f"{cells[(m, t)]:8.1f}" for m in sizes))

with open(out / "report.csv", newline="") as fh:
    report = list(csv.DictReader(fh))
print("\nbaseline vs uniform soups")
for r in report:
    if r["variant"] in ("baseline", "aes-tune", "aes-rand") and "+" not in r["target"]:
        print(f"  {r['attack']:<4} {r['variant']:<9} {r['target']:<5} asr {float(r['asr']):5.1f}  "
              f"l2 {float(r['l2']):.3f}  flatness {float(r['flatness']):.4f}")
