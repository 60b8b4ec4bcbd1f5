"""Compare how flat the surrogate's loss is around a single session and around a soup.

Run from the repo root after a repro run::

    soupforge repro --config default --out runs/desk
    python demos/flatness_surface.py runs/desk

Draws the 2-D loss slice as a coarse character map and prints the ring probe.
"""

import sys
from pathlib import Path

import numpy as np

from soupforge import evaluate as E
from soupforge import pipeline as P
from soupforge.config import Config

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/desk")
cfg = Config.load()
seed = cfg["seed"]
surrogate = P.load_zoo(cfg, seed, out)[cfg["zoo.surrogate"]]
spec = P.flatness_spec(cfg, seed)

member = P.load_members(cfg, out, "DIM", "rand")[0]
soup = P.load_soups(cfg, out, "DIM")["aes-rand"]

SHADES = " .:-=+*#%@"


def sketch(adv, n=16):
    rows = E.loss_surface(surrogate, adv.images[:n], adv.labels[:n], spec)
    side = len(spec.grid())
    loss = np.array([r[2] for r in rows]).reshape(side, side)
    # one shade per decile of this map's own range
    level = np.digitize(loss, np.linspace(loss.min(), loss.max(), len(SHADES) + 1)[1:-1])
    for line in level[::4]:
        print("  " + "".join(SHADES[v] for v in line[::2]))
    return loss


for name, adv in [("single session", member), ("uniform soup", soup)]:
    print(f"\n{name}")
    loss = sketch(adv)
    ring = E.flatness_probe(surrogate, adv.images, adv.labels, spec)
    print(f"  loss at centre {loss[len(loss) // 2, len(loss) // 2]:.3f}, "
          f"range over the slice {loss.max() - loss.min():.3f}, "
          f"mean ring change (r={spec.radius}) {ring.mean():.4f}")
