"""Walk through one soup by hand: train two small nets, attack one, test on the other.

Run from the repo root::

    python demos/soup_walkthrough.py

Takes about ten seconds.  Prints each session's transfer rate next to the
soup's, then the distortion numbers that go with them.
"""

import numpy as np

from soupforge import attacks as A
from soupforge import data as D
from soupforge import evaluate as E
from soupforge import models as M
from soupforge import soup as S

train_set, test_set = D.split(D.digits_dataset(16), 0.25, seed=0)
train, test = train_set.to_batch(), test_set.to_batch()


def fit(name, seed, depth, width):
    arch = M.conv_arch(name, (1, 16, 16), 10, depth=depth, width=width)
    model, acc = M.train(M.build_model(arch, seed), train.images, train.labels,
                         epochs=10, lr=0.05, batch=32, seed=seed, test=(test.images, test.labels))
    print(f"{name}: test accuracy {acc:.3f}")
    return model


surrogate = fit("surrogate", 1, 1, 8)
target = fit("target", 3, 2, 16)

# only attack images both nets already get right, so a flip means transfer
batch = test.subset(E.correct_indices(test, [surrogate, target])[:150])

# ten DIM sessions that differ only in their random seed
sessions = S.make_rand_sessions("DIM", m=10, base_seed=0, eps=0.15, alpha=0.015, steps=10)
members = [S.run_session(s, surrogate, batch) for s in sessions]
rates = [E.attack_success_rate(a, target) for a in members]
for s, r in zip(sessions, rates):
    print(f"session {s.session_id:2d} (seed {s.seed:>10d}): transfer {r:5.1f}%")

soup = S.average_uniform(members)
print(f"\nmember mean {np.mean(rates):.1f}%, best {max(rates):.1f}%, "
      f"uniform soup {E.attack_success_rate(soup, target):.1f}%")

# the weighted and greedy variants need a score per member; reuse the target here
weighted = S.average_weighted(members, rates)
greedy = S.average_greedy(members, rates, k=3)
print(f"weighted soup {E.attack_success_rate(weighted, target):.1f}%, "
      f"greedy soup (top 3) {E.attack_success_rate(greedy, target):.1f}%")

for name, adv in [("session 1", members[0]), ("soup", soup)]:
    q = E.stealth(adv)
    print(f"{name:>9}: l2 {q['l2']:.3f}  linf {q['linf']:.3f}  "
          f"psnr {q['psnr']:.2f}  ssim {q['ssim']:.3f}")
assert soup.linf.max() <= 0.15 + 1e-6
