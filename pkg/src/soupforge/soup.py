"""Attack sessions and the strategies that average their outputs into a soup.

A session is one complete attack run under one hyperparameter setting and
seed.  A soup is a convex combination of several sessions' adversarial
images of the same clean batch.  Because every member lies inside the
eps-ball and the [0, 1] box, so does any convex combination; the averaging
functions never re-project, they only assert.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .attacks import AdvBatch, AttackSpec, preset, run_attack


def _steps(start, step, n=10, digits=3):
    return tuple(round(start + step * i, digits) for i in range(n))


# ten-value grids swept by tune sessions: kind -> (hyperparameter, values)
TUNE_GRIDS = {
    "MI": ("mu", _steps(0.91, 0.01)),
    "NI": ("mu", _steps(0.91, 0.01)),
    "VMI": ("n_vmi", tuple(range(16, 26))),
    "PGN": ("delta", _steps(0.491, 0.001)),
    "DIM": ("resize_rate", _steps(1.132, 0.002)),
    "SIM": ("mu", _steps(0.91, 0.01)),
    "ADMIX": ("eta", _steps(0.191, 0.001)),
    "SSA": ("rho", _steps(0.500, 0.005)),
    "FIA": ("p_drop", _steps(0.255, 0.005)),
    "NAA": ("gamma", _steps(0.91, 0.01)),
    # integrated attacks tune one component's knob
    "TI-DIM": ("resize_rate", _steps(1.132, 0.002)),
    "SI-NI-DIM": ("mu", _steps(0.91, 0.01)),
    "SSA-SI-DIM": ("rho", _steps(0.500, 0.005)),
    "PGN-DIM": ("delta", _steps(0.491, 0.001)),
}

STRATEGIES = ("uniform", "weighted", "greedy", "wild")
FILL_POLICIES = ("default", "random", "none")


class SoupError(ValueError):
    pass


@dataclass(frozen=True)
class SessionSpec:
    session_id: int
    attack: AttackSpec
    seed: int
    surrogate: str = "A"

    def __post_init__(self):
        if self.session_id < 1:
            raise ValueError("session ids start at 1")
        if self.attack.seed != self.seed:
            object.__setattr__(self, "attack", self.attack.replace(seed=self.seed))

    def to_dict(self):
        return {"session_id": self.session_id, "attack": self.attack.to_dict(),
                "seed": self.seed, "surrogate": self.surrogate}


@dataclass
class SoupSpec:
    strategy: str
    members: list
    weights: list
    holdout: str = None
    k: int = None
    fill: str = None
    degenerate: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SoupError(f"unknown strategy {self.strategy!r}")
        w = np.asarray(self.weights, dtype=np.float64)
        if len(w) != len(self.members) or len(w) == 0:
            raise SoupError("need one weight per member and at least one member")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise SoupError(f"weights are not on the simplex: {w.tolist()}")

    def to_dict(self):
        return {"strategy": self.strategy, "members": list(self.members),
                "weights": [float(w) for w in self.weights], "holdout": self.holdout,
                "k": self.k, "fill": self.fill, "degenerate": self.degenerate}


def derive_seed(base_seed, session_id):
    """Stable 31-bit seed for one session, independent of Python's hash salt."""
    digest = hashlib.sha256(f"{int(base_seed)}:{int(session_id)}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def base_spec(kind, **params):
    """Default spec for a basic kind or an integrated preset name."""
    name = kind.upper()
    if "-" in name:
        return preset(name, **params)
    return AttackSpec(kind=name, **params)


def make_tune_sessions(kind, grid=None, base_seed=0, surrogate="A", **params):
    """One session per grid value of the kind's tuned hyperparameter, all sharing ``base_seed``.

    ``grid`` is a ``(name, values)`` pair; the built-in ten-value grid is used
    when omitted.
    """
    name, values = grid if grid is not None else TUNE_GRIDS[kind.upper()]
    values = tuple(values)
    if not values:
        raise SoupError("empty hyperparameter grid")
    spec = base_spec(kind, **params)
    return [SessionSpec(i + 1, spec.replace(**{name: v}), int(base_seed), surrogate)
            for i, v in enumerate(values)]


def make_rand_sessions(kind, m=10, base_seed=0, surrogate="A", **params):
    """``m`` sessions with identical default hyperparameters and distinct derived seeds."""
    if m < 1:
        raise SoupError("need m >= 1")
    spec = base_spec(kind, **params)
    return [SessionSpec(i, spec, derive_seed(base_seed, i), surrogate) for i in range(1, m + 1)]


def run_session(session, surrogate, batch, pool=None):
    adv = run_attack(session.attack, surrogate, batch, pool=pool)
    adv.provenance.update(session_id=session.session_id, seed=session.seed,
                          surrogate=session.surrogate)
    return adv


# ---------------------------------------------------------------- averaging

def _member_key(adv):
    digest = hashlib.sha256(np.ascontiguousarray(adv.images).tobytes()).hexdigest()
    attack = adv.provenance.get("attack", {})
    return (adv.session_id, str(sorted(attack.items())), digest)


def _check_members(members):
    if not members:
        raise SoupError("empty member list")
    ref = members[0]
    hashes = {m.provenance.get("config_hash") for m in members} - {None}
    if len(hashes) > 1:
        raise SoupError(f"members come from different configs: {sorted(hashes)}")
    for m in members[1:]:
        if m.images.shape != ref.images.shape:
            raise SoupError("member shapes differ")
        if not (np.array_equal(m.originals, ref.originals) and np.array_equal(m.labels, ref.labels)):
            raise SoupError("members do not share clean originals")


def _eps_of(members):
    attack = members[0].provenance.get("attack")
    return None if attack is None else max(m.provenance["attack"]["eps"] for m in members)


def combine(members, weights, spec, quantize=False):
    """Weighted sum in ascending session-id order, float64 accumulation.

    Asserts that the result stays inside every member's eps-ball and [0, 1].
    """
    _check_members(members)
    weights = np.asarray(weights, dtype=np.float64)
    order = sorted(range(len(members)), key=lambda i: _member_key(members[i]))
    acc = np.zeros(members[0].images.shape, dtype=np.float64)
    for i in order:
        acc += weights[i] * members[i].images.astype(np.float64)
    dtype = members[0].images.dtype
    images = acc.astype(dtype)
    originals = members[0].originals
    eps = _eps_of(members)
    slack = 1e-6
    if eps is not None:
        gap = np.abs(images.astype(np.float64) - originals.astype(np.float64)).max(initial=0.0)
        assert gap <= eps + slack, f"soup left the eps-ball: {gap} > {eps}"
    assert images.min(initial=0) >= -slack and images.max(initial=0) <= 1 + slack, \
        "soup left [0, 1]"
    # weights summing to 1 +- ulp can push saturated pixels one ulp outside
    images = np.clip(images, 0, 1).astype(dtype, copy=False)
    if quantize:
        images = (np.round(images.astype(np.float64) * 255) / 255).astype(dtype)
    provenance = {"soup": spec.to_dict(),
                  "attack": members[0].provenance.get("attack"),
                  "session_id": 0}
    hashes = {m.provenance.get("config_hash") for m in members} - {None}
    if hashes:
        provenance["config_hash"] = hashes.pop()
    return AdvBatch(images, originals, members[0].labels, None, provenance)


def average_uniform(members, quantize=False):
    m = len(members)
    if m == 0:
        raise SoupError("empty member list")
    spec = SoupSpec("uniform", [a.session_id for a in members], [1.0 / m] * m)
    return combine(members, spec.weights, spec, quantize)


def _rank_positions(scores, ids):
    """Ascending rank position per member (0 = worst); ties share their mean position."""
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(scores)), key=lambda i: (scores[i], ids[i]))
    pos = np.empty(len(scores))
    pos[order] = np.arange(len(scores), dtype=np.float64)
    for s in np.unique(scores):
        tied = scores == s
        pos[tied] = pos[tied].mean()
    return pos


def weighted_schedule(scores, ids, base=16.0):
    """Weights ``base + rank position`` normalised to 1 (16..25 over 205 for ten members)."""
    raw = base + _rank_positions(scores, ids)
    if np.any(raw < 0):
        raise SoupError("schedule base too small for this many members")
    return raw / raw.sum()


def average_weighted(members, holdout_scores, base=16.0, holdout=None, quantize=False):
    """Rank members by a hold-out score (higher = better) and weight them on an arithmetic schedule."""
    if len(holdout_scores) != len(members):
        raise SoupError("need one hold-out score per member")
    ids = [a.session_id for a in members]
    w = weighted_schedule(holdout_scores, ids, base)
    spec = SoupSpec("weighted", ids, w.tolist(), holdout=holdout)
    return combine(members, w, spec, quantize)


def average_greedy(members, holdout_scores, k, fill="default", seed=0, default_index=None,
                   holdout=None, quantize=False):
    """Uniform soup of the top-``k`` members, filled back to ``m`` entries.

    ``fill="default"`` pads with copies of the default-hyperparameter member
    (``default_index``, the last member when omitted); ``"random"`` pads
    with seeded random draws from all members; ``"none"`` keeps just the
    top ``k``.
    """
    m = len(members)
    if not 1 <= k <= m:
        raise SoupError(f"need 1 <= k <= {m}, got {k}")
    if fill not in FILL_POLICIES:
        raise SoupError(f"unknown fill policy {fill!r}")
    if len(holdout_scores) != m:
        raise SoupError("need one hold-out score per member")
    ids = [a.session_id for a in members]
    ranked = sorted(range(m), key=lambda i: (-float(holdout_scores[i]), ids[i]))
    counts = np.zeros(m)
    counts[ranked[:k]] = 1
    n_fill = m - k if fill != "none" else 0
    if n_fill:
        if fill == "default":
            counts[m - 1 if default_index is None else default_index] += n_fill
        else:
            picks = np.random.default_rng(seed).integers(0, m, size=n_fill)
            np.add.at(counts, picks, 1)
    keep = np.flatnonzero(counts)
    w = counts[keep] / counts.sum()
    chosen = [members[i] for i in keep]
    spec = SoupSpec("greedy", [ids[i] for i in keep], w.tolist(), holdout=holdout, k=k, fill=fill)
    return combine(chosen, w, spec, quantize)


def wild_soup(candidates, holdout_scores, gate=0.1, holdout=None, quantize=False):
    """Uniform soup over candidates whose hold-out score is within ``gate`` (relative) of the best.

    With fewer than two admitted, the best candidate passes through and the
    soup is flagged degenerate.
    """
    if not candidates:
        raise SoupError("empty member list")
    scores = np.asarray(holdout_scores, dtype=np.float64)
    best = int(np.argmax(scores))
    admitted = [i for i in range(len(candidates)) if scores[i] >= scores[best] * (1 - gate)]
    if len(admitted) < 2:
        admitted = [best]
    chosen = [candidates[i] for i in admitted]
    spec = SoupSpec("wild", [c.session_id for c in chosen], [1.0 / len(chosen)] * len(chosen),
                    holdout=holdout, degenerate=len(chosen) < 2)
    soup = combine(chosen, spec.weights, spec, quantize)
    soup.provenance["attacks"] = [c.provenance.get("attack", {}).get("kind") for c in chosen]
    return soup


@dataclass
class SoupPlan:
    """Everything needed to regenerate a soup's member sessions."""

    kind: str
    mode: str  # "tune" or "rand"
    m: int = 10
    base_seed: int = 0
    params: dict = field(default_factory=dict)

    def sessions(self, surrogate="A"):
        if self.mode == "tune":
            name, values = TUNE_GRIDS[self.kind.upper()]
            return make_tune_sessions(self.kind, (name, values[:self.m]), self.base_seed,
                                      surrogate, **self.params)
        if self.mode == "rand":
            return make_rand_sessions(self.kind, self.m, self.base_seed, surrogate, **self.params)
        raise SoupError(f"unknown soup mode {self.mode!r}")


__all__ = ["TUNE_GRIDS", "SessionSpec", "SoupSpec", "SoupPlan", "SoupError", "derive_seed",
           "make_tune_sessions", "make_rand_sessions", "run_session", "combine",
           "average_uniform", "average_weighted", "average_greedy", "wild_soup",
           "weighted_schedule"]
