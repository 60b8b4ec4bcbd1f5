"""Transfer attacks under an l-infinity budget.

Every gradient-based kind shares one loop: evaluate a (possibly transformed
and copy-averaged) input gradient, optionally smooth it, feed it to a
momentum rule, step by ``alpha * sign``, then project back onto the
``eps``-ball around the clean image and the [0, 1] box.

Kinds map onto that loop as follows::

    IFGSM          plain sign step
    MI NI VMI PGN  gradient-stability momentum rules
    DIM SIM ADMIX SSA   input transforms on top of MI
    FIA NAA        feature-level objectives, minimised with MI

Integrated attacks (TI-DIM, SI-NI-DIM, ...) are built with :func:`compose`.
Inside one gradient evaluation the nesting is fixed: one DIM draw per step
(applied last, next to the model), then SSA samples, then Admix mixes, then
SIM scales.  Each random component owns an independent RNG stream derived
from the spec seed, so switching one component off never perturbs another.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T

KINDS = ("IFGSM", "MI", "NI", "VMI", "PGN", "DIM", "SIM", "ADMIX", "SSA", "FIA", "NAA")
RULES = {"IFGSM": "none", "MI": "mi", "NI": "ni", "VMI": "vmi", "PGN": "pgn",
         "DIM": "mi", "SIM": "mi", "ADMIX": "mi", "SSA": "mi",
         "FIA": "feature", "NAA": "feature"}
TRANSFORMS = ("dim", "ssa", "admix", "sim")  # nesting order, outermost first
_STREAMS = ("dim", "ssa", "admix", "vmi", "pgn", "fia", "noise")
_CHUNK = 4096  # max images per forward pass when batching copies


class DegenerateFeatureError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """Attack kind, budget, and every per-attack hyperparameter.

    Budgets are in the [0, 1] pixel domain (16/255 and 1.6/255 are the usual
    ImageNet settings).  ``zeta`` is a multiple of ``eps``; ``sigma=None``
    means ``sigma = eps``.
    """

    kind: str = "MI"
    eps: float = 16 / 255
    alpha: float = 1.6 / 255
    steps: int = 10
    mu: float = 1.0
    n_vmi: int = 20
    beta: float = 1.5
    n_pgn: int = 20
    delta: float = 0.5
    zeta: float = 3.0
    p: float = 0.5
    resize_rate: float = 1.15
    n_scales: int = 5
    eta: float = 0.2
    mix_count: int = 3
    rho: float = 0.5
    sigma: float | None = None
    n_ssa: int = 20
    p_drop: float = 0.3
    n_ens: int = 30
    gamma: float = 1.0
    n_integrated: int = 30
    ti_kernel: int = 1
    chain: tuple = ()
    grad_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", self.kind.upper())
        object.__setattr__(self, "chain", tuple(sorted(set(c.lower() for c in self.chain))))
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        bad = set(self.chain) - set(TRANSFORMS)
        if bad:
            raise ValueError(f"unknown chain transforms {sorted(bad)}")
        if self.rule == "feature" and (self.chain or self.ti_kernel != 1):
            raise ValueError(f"{self.kind} does not compose with input transforms")
        if self.eps < 0 or self.alpha <= 0 or self.steps < 1:
            raise ValueError("need eps >= 0, alpha > 0, steps >= 1")
        if not (0 <= self.p <= 1 and 0 <= self.p_drop <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.resize_rate < 1 or self.ti_kernel < 1 or self.ti_kernel % 2 == 0:
            raise ValueError("need resize_rate >= 1 and an odd ti_kernel >= 1")
        for name in ("n_vmi", "n_pgn", "n_scales", "mix_count", "n_ssa", "n_ens", "n_integrated"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def rule(self):
        return RULES[self.kind]

    @property
    def transforms(self):
        own = {"DIM": "dim", "SIM": "sim", "ADMIX": "admix", "SSA": "ssa"}.get(self.kind)
        found = set(self.chain) | ({own} if own else set())
        return tuple(t for t in TRANSFORMS if t in found)

    @property
    def noise_std(self):
        return self.eps if self.sigma is None else self.sigma

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["chain"] = list(self.chain)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if k == "chain" else v) for k, v in d.items() if k in names})

    def canonical(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


PRESETS = {
    "TI-DIM": ("TI", "DIM"),
    "SI-NI-DIM": ("SIM", "NI", "DIM"),
    "SSA-SI-DIM": ("SSA", "SIM", "DIM"),
    "PGN-DIM": ("PGN", "DIM"),
}


def compose(*names, ti_length=5, **params):
    """Integrate several attacks into one spec.

    At most one gradient-stability kind (IFGSM/MI/NI/VMI/PGN) sets the
    momentum rule (MI when absent); DIM/SIM/ADMIX/SSA become input
    transforms; ``TI`` switches on gradient smoothing with a ``ti_length``
    triangle kernel.
    """
    names = [n.upper() for n in names]
    stability = [n for n in names if n in ("IFGSM", "MI", "NI", "VMI", "PGN")]
    inputs = [n for n in names if n in ("DIM", "SIM", "ADMIX", "SSA")]
    unknown = set(names) - set(stability) - set(inputs) - {"TI"}
    if unknown or len(stability) > 1:
        raise ValueError(f"cannot compose {names}")
    if stability:
        kind, chain = stability[0], inputs
    elif inputs:
        kind, chain = inputs[0], inputs[1:]
    else:
        kind, chain = "MI", []
    if "TI" in names:
        params.setdefault("ti_kernel", ti_length)
    return AttackSpec(kind=kind, chain=tuple(c.lower() for c in chain), **params)


def preset(name, **params):
    """One of the integrated attacks: TI-DIM, SI-NI-DIM, SSA-SI-DIM, PGN-DIM."""
    return compose(*PRESETS[name], **params)


@dataclass
class AdvBatch:
    """Adversarial images next to their clean originals, with provenance."""

    images: np.ndarray
    originals: np.ndarray
    labels: np.ndarray
    loss: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape != self.originals.shape:
            raise T.ShapeError("adversarial and original shapes differ")
        if self.loss is None:
            self.loss = np.full(len(self.labels), np.nan)

    @property
    def perturbation(self):
        return self.images.astype(np.float64) - self.originals.astype(np.float64)

    @property
    def linf(self):
        return np.abs(self.perturbation).reshape(len(self.labels), -1).max(axis=1)

    @property
    def l2(self):
        return np.sqrt((self.perturbation ** 2).reshape(len(self.labels), -1).sum(axis=1))

    @property
    def session_id(self):
        return self.provenance.get("session_id", 0)


# ---------------------------------------------------------------- primitives

def project(x_adv, x, eps):
    """Clip into the eps-ball around ``x`` and the [0, 1] box."""
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0, 1).astype(x.dtype, copy=False)


def _per_image(a):
    return a.reshape(len(a), -1)


def _l1(a):
    return np.abs(_per_image(a)).sum(axis=1).reshape((-1,) + (1,) * (a.ndim - 1))


def mi_gradient(g_prev, grad, mu):
    """Momentum accumulation of the l1-normalized gradient.

    Images whose gradient is identically zero just decay: ``mu * g_prev``.
    """
    norm = _l1(grad)
    safe = np.where(norm > 0, norm, 1)
    step = np.where(norm > 0, grad / safe, 0)
    return (mu * g_prev + step).astype(grad.dtype, copy=False)


def ni_lookahead(x_t, g_prev, alpha, mu):
    """Nesterov look-ahead point ``x_t + alpha * mu * g_prev``."""
    return (x_t + alpha * mu * g_prev).astype(x_t.dtype, copy=False)


def vmi_gradient(x_t, grad, v_prev, grad_fn, n, beta, eps, rng):
    """Variance tuning.

    Returns the momentum input ``grad + v_prev`` (normalized later by
    :func:`mi_gradient`) and the new variance term
    ``mean_i grad_fn(x_t + r_i) - grad`` with ``r_i ~ U(-beta*eps, beta*eps)``.
    """
    if beta == 0 or eps == 0:
        return grad + v_prev, np.zeros_like(grad)
    total = np.zeros(grad.shape, dtype=np.float64)
    bound = beta * eps
    for _ in range(n):
        r = rng.uniform(-bound, bound, size=x_t.shape).astype(x_t.dtype)
        total += grad_fn(x_t + r)
    v_next = (total / n).astype(grad.dtype) - grad
    return grad + v_prev, v_next


def pgn_gradient(x_t, grad_fn, n, delta, zeta, alpha, rng):
    """Penalized-gradient-norm estimate averaged over ``n`` neighbours.

    For each ``x' = x_t + U(-zeta, zeta)``: ``g1 = grad_fn(x')``, a look-ahead
    ``x'' = x' - alpha * g1 / mean|g1|`` and ``g2 = grad_fn(x'')``; the sample
    contributes ``(1 - delta) * g1 + delta * g2``.  A zero ``g1`` skips the
    look-ahead (``g2 = g1``).
    """
    total = None
    for _ in range(n):
        x1 = (x_t + rng.uniform(-zeta, zeta, size=x_t.shape)).astype(x_t.dtype)
        g1 = grad_fn(x1)
        scale = np.abs(_per_image(g1)).mean(axis=1).reshape((-1,) + (1,) * (g1.ndim - 1))
        if np.all(scale == 0):
            g2 = g1
        else:
            safe = np.where(scale > 0, scale, 1)
            x2 = (x1 - alpha * np.where(scale > 0, g1 / safe, 0)).astype(x_t.dtype)
            g2 = np.where(scale > 0, grad_fn(x2), g1)
        term = (1 - delta) * g1 + delta * g2
        total = term if total is None else total + term
    return (total / n).astype(x_t.dtype, copy=False)


def _nearest(n_out, n_in):
    return np.floor(np.arange(n_out) * (n_in / n_out)).astype(int)


def dim_params(rng, h, resize_rate):
    """Draw the (size, top, left) triple of one diverse-input transform."""
    hr = int(np.floor(h * resize_rate))
    size = int(rng.integers(h, hr, endpoint=True))
    top = int(rng.integers(0, hr - size, endpoint=True))
    left = int(rng.integers(0, hr - size, endpoint=True))
    return size, top, left


def dim_index(h, w, resize_rate, size, top, left):
    """Index map for resize-to-``size``, zero-pad to ``floor(h*r)``, resize back.

    All resizes are nearest-neighbour, so the composite is a gather with
    ``-1`` marking padded positions.
    """
    hr = int(np.floor(h * resize_rate))
    canvas = np.full((hr, hr), -1, dtype=np.int64)
    rows = _nearest(size, h)
    cols = _nearest(size, w)
    canvas[top:top + size, left:left + size] = rows[:, None] * w + cols[None, :]
    back_r = _nearest(h, hr)
    back_c = _nearest(w, hr)
    return canvas[back_r[:, None], back_c[None, :]]


def dim_transform(x, p, resize_rate, rng):
    """Apply a diverse-input transform with probability ``p``.

    Works on arrays or tracked tensors; returns ``(output, params)`` where
    ``params`` is ``None`` when the identity branch was taken.
    """
    h, w = x.shape[-2:]
    if p <= 0 or rng.random() >= p:
        return x, None
    params = dim_params(rng, h, resize_rate)
    out = T.take(x, dim_index(h, w, resize_rate, *params))
    return (out if isinstance(x, T.Tensor) else out.data), params


def ssa_draw(shape, rho, sigma, rng, dtype):
    """Noise ``xi ~ N(0, sigma^2)`` and spectrum mask ``M ~ U(1-rho, 1+rho)``."""
    xi = rng.normal(0.0, 1.0, size=shape) * sigma
    mask = rng.uniform(1 - rho, 1 + rho, size=shape)
    return xi.astype(dtype), mask.astype(dtype)


def ssa_apply(x, xi, mask):
    """``idct2(dct2(x + xi) * mask)``; arrays or tracked tensors."""
    z = T.idct2(T.mul(T.dct2(T.add(x, xi)), mask))
    return z if isinstance(x, T.Tensor) else z.data


def ssa_transform(x, rho, sigma, rng):
    """One spectrum-simulation sample; the identity when ``rho = sigma = 0``."""
    if rho == 0 and sigma == 0:
        return x
    xi, mask = ssa_draw(x.shape, rho, sigma, rng, x.dtype)
    return ssa_apply(x, xi, mask)


def ti_kernel(length):
    """Normalized separable triangle kernel of odd ``length``."""
    r = length // 2
    tri = (r + 1 - np.abs(np.arange(-r, r + 1))).astype(np.float64)
    k = np.outer(tri, tri)
    return k / k.sum()


def ti_smooth(grad, length):
    """Translation-invariant smoothing: depthwise triangle-kernel convolution."""
    if length == 1:
        return grad
    return T.smooth2d(grad, ti_kernel(length)).data


# ---------------------------------------------------------------- gradients

def transformed_gradient(model, x, labels, transforms=(None,)):
    """Mean over ``transforms`` of the input gradient of the summed CE loss.

    Each transform maps a tracked tensor to a tracked tensor (``None`` is the
    identity).  Copies are stacked along the batch axis and evaluated in
    chunks, so the result is the exact average of per-copy gradients.
    """
    n = len(x)
    per_chunk = max(1, _CHUNK // max(n, 1))
    total = None
    for start in range(0, len(transforms), per_chunk):
        group = transforms[start:start + per_chunk]
        tape = T.Tape()
        leaf = tape.leaf(x)
        outs = [leaf if t is None else t(leaf) for t in group]
        z = outs[0] if len(outs) == 1 else T.concat(outs)
        y = np.tile(labels, len(outs))
        loss = T.softmax_cross_entropy(model.logits(z), y, reduction="sum")
        (g,) = tape.gradient(loss, leaf)
        total = g if total is None else total + g
    if len(transforms) == 1:
        return total
    return (total / len(transforms)).astype(x.dtype, copy=False)


def input_gradient(model, x, labels):
    return transformed_gradient(model, x, labels)


def _scale_fn(i):
    if i == 0:
        return None
    c = 1.0 / 2 ** i
    return lambda z: T.scale(z, c)


def sim_gradient(model, x, labels, n):
    """Scale invariance: mean of ``d/dx L(x / 2**i)`` for ``i < n``."""
    return transformed_gradient(model, x, labels, [_scale_fn(i) for i in range(n)])


def _admix_pool(x, labels, pool, mix_count, rng):
    """Per image, ``mix_count`` pool images drawn from other classes."""
    pool_x, pool_y = pool
    picks = np.empty((mix_count, len(x)), dtype=np.int64)
    for i, y in enumerate(labels):
        candidates = np.flatnonzero(pool_y != y)
        if len(candidates) == 0:
            candidates = np.arange(len(pool_y))
        picks[:, i] = rng.choice(candidates, size=mix_count, replace=True)
    return [pool_x[p] for p in picks]


def admix_gradient(model, x, labels, eta, mixes, n):
    """Admix: mean over mixes ``m`` and scales of ``d/dx L((x + eta*m) / 2**i)``."""
    transforms = []
    for mix in mixes:
        add = mix * x.dtype.type(eta)
        for i in range(n):
            s = _scale_fn(i)
            transforms.append(_chain([lambda z, a=add: T.add(z, a), s]))
    return transformed_gradient(model, x, labels, transforms)


def _chain(fns):
    fns = [f for f in fns if f is not None]
    if not fns:
        return None

    def run(z):
        for f in fns:
            z = f(z)
        return z

    return run


class GradientOracle:
    """Per-step gradient estimate for one spec, surrogate and label set.

    Call :meth:`begin_step` once per iteration (draws the DIM transform),
    then call the oracle on any point; each call draws fresh SSA/Admix
    samples and applies gradient noise and TI smoothing.
    """

    def __init__(self, spec, model, labels, pool, rngs):
        self.spec = spec
        self.model = model
        self.labels = labels
        self.pool = pool
        self.rngs = rngs
        self.dim = None
        self.kernel = ti_kernel(spec.ti_kernel) if spec.ti_kernel > 1 else None

    def begin_step(self, shape):
        spec = self.spec
        self.dim = None
        if "dim" in spec.transforms and spec.p > 0 and self.rngs["dim"].random() < spec.p:
            h, w = shape[-2:]
            params = dim_params(self.rngs["dim"], h, spec.resize_rate)
            index = dim_index(h, w, spec.resize_rate, *params)
            self.dim = lambda z: T.take(z, index)

    def _copies(self, x):
        spec = self.spec
        chain = spec.transforms
        ssa = [None]
        if "ssa" in chain and not (spec.rho == 0 and spec.noise_std == 0):
            ssa = []
            for _ in range(spec.n_ssa):
                xi, mask = ssa_draw(x.shape, spec.rho, spec.noise_std, self.rngs["ssa"], x.dtype)
                ssa.append(lambda z, a=xi, m=mask: ssa_apply(z, a, m))
        mixes = [None]
        if "admix" in chain and spec.eta != 0:
            pool = self.pool or (x, self.labels)
            mixes = [lambda z, a=m * x.dtype.type(spec.eta): T.add(z, a)
                     for m in _admix_pool(x, self.labels, pool, spec.mix_count, self.rngs["admix"])]
        scales = [None]
        if "sim" in chain or "admix" in chain:
            scales = [_scale_fn(i) for i in range(spec.n_scales)]
        return [_chain([m, s, c, self.dim]) for s in ssa for m in mixes for c in scales]

    def __call__(self, x):
        g = transformed_gradient(self.model, x, self.labels, self._copies(x))
        if self.spec.grad_noise > 0:
            rms = np.sqrt((_per_image(g).astype(np.float64) ** 2).mean(axis=1))
            rms = rms.reshape((-1,) + (1,) * (g.ndim - 1))
            noise = self.rngs["noise"].normal(size=g.shape) * rms * self.spec.grad_noise
            g = (g + noise).astype(g.dtype)
        if self.kernel is not None:
            g = T.smooth2d(g, self.kernel).data
        return g


def _streams(seed):
    children = np.random.SeedSequence(int(seed)).spawn(len(_STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(_STREAMS, children)}


# ---------------------------------------------------------------- attacks

def _finish(spec, model, batch, x_adv):
    loss = T.softmax_cross_entropy(model.logits(x_adv), batch.labels, "none").data
    return AdvBatch(x_adv, batch.images, batch.labels, loss, {"attack": spec.to_dict()})


def _momentum_attack(spec, model, batch, pool, callback):
    x = batch.images
    rngs = _streams(spec.seed)
    oracle = GradientOracle(spec, model, batch.labels, pool, rngs)
    x_adv = x.copy()
    g = np.zeros_like(x)
    v = np.zeros_like(x)
    alpha = x.dtype.type(spec.alpha)
    for t in range(spec.steps):
        oracle.begin_step(x.shape)
        point = ni_lookahead(x_adv, g, spec.alpha, spec.mu) if spec.rule == "ni" else x_adv
        if spec.rule == "pgn":
            grad = pgn_gradient(point, oracle, spec.n_pgn, spec.delta, spec.zeta * spec.eps,
                                spec.alpha, rngs["pgn"])
        else:
            grad = oracle(point)
        if spec.rule == "vmi":
            grad, v = vmi_gradient(point, grad, v, oracle, spec.n_vmi, spec.beta, spec.eps,
                                   rngs["vmi"])
        if spec.rule == "none":
            direction = grad
        else:
            g = mi_gradient(g, grad, spec.mu)
            direction = g
        x_adv = project(x_adv + alpha * np.sign(direction), x, spec.eps)
        if callback is not None:
            callback(t, x_adv)
    return x_adv


def _logit_gradient_at_features(model, f, labels):
    """d(true-class logit) / d(features) evaluated at feature activations ``f``."""
    tape = T.Tape()
    leaf = tape.leaf(f)
    onehot = np.eye(model.num_classes, dtype=f.dtype)[labels]
    obj = T.sum(T.mul(model.head(leaf), onehot))
    return tape.gradient(obj, leaf)[0]


def fia_importance(model, x, labels, p_drop, n, rng):
    """Aggregate feature importance over ``n`` random pixel-drop masks, l2-normalized."""
    if p_drop == 0:
        n = 1  # every mask is the identity
    total = None
    for _ in range(n):
        xm = x if p_drop == 0 else x * (rng.random(x.shape) >= p_drop).astype(x.dtype)
        g = _logit_gradient_at_features(model, model.features(xm).data, labels)
        total = g if total is None else total + g
    agg = total / n if n > 1 else total
    norm = np.sqrt((_per_image(agg).astype(np.float64) ** 2).sum(axis=1))
    if np.any(norm == 0):
        raise DegenerateFeatureError(
            f"zero feature importance for images {np.flatnonzero(norm == 0).tolist()}")
    return (agg / norm.reshape((-1,) + (1,) * (agg.ndim - 1))).astype(x.dtype)


def naa_weights(model, x, labels, steps):
    """Path-averaged feature gradients from the black baseline to ``x``."""
    total = None
    for j in range(1, steps + 1):
        f = model.features(x * x.dtype.type(j / steps)).data
        g = _logit_gradient_at_features(model, f, labels)
        total = g if total is None else total + g
    return total / steps if steps > 1 else total


def naa_attribution(model, x_adv, weights, base):
    """Neuron attribution ``(f(x_adv) - f(0)) * weights`` (tensor-valued)."""
    return T.mul(T.sub(model.features(x_adv), base), weights)


def naa_objective(attribution, gamma):
    """Positive attributions plus ``gamma`` times negative ones, summed."""
    pos = T.relu(attribution)
    neg = T.sub(attribution, pos)
    return T.add(T.sum(pos), T.scale(T.sum(neg), gamma))


def _feature_attack(spec, model, batch, callback):
    x, labels = batch.images, batch.labels
    rngs = _streams(spec.seed)
    if spec.kind == "FIA":
        importance = fia_importance(model, x, labels, spec.p_drop, spec.n_ens, rngs["fia"])

        def objective(leaf):
            return T.sum(T.mul(model.features(leaf), importance))
    else:
        weights = naa_weights(model, x, labels, spec.n_integrated)
        base = model.features(np.zeros_like(x[:1])).data

        def objective(leaf):
            return naa_objective(naa_attribution(model, leaf, weights, base), spec.gamma)

    x_adv = x.copy()
    g = np.zeros_like(x)
    alpha = x.dtype.type(spec.alpha)
    for t in range(spec.steps):
        tape = T.Tape()
        leaf = tape.leaf(x_adv)
        (grad,) = tape.gradient(objective(leaf), leaf)
        g = mi_gradient(g, grad, spec.mu)
        x_adv = project(x_adv - alpha * np.sign(g), x, spec.eps)
        if callback is not None:
            callback(t, x_adv)
    return x_adv


def run_attack(spec, surrogate, batch, pool=None, callback=None):
    """Craft an :class:`AdvBatch` from ``batch`` against ``surrogate``.

    ``pool`` is an ``(images, labels)`` pair Admix mixes from (defaults to
    the batch itself).  ``callback(t, x_adv)`` is invoked after every step.
    """
    if not isinstance(spec, AttackSpec):
        raise TypeError("spec must be an AttackSpec")
    x = batch.images
    if x.shape[1:] != tuple(surrogate.arch.input_shape):
        raise T.ShapeError(f"batch shape {x.shape[1:]} != model input {surrogate.arch.input_shape}")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("images must lie in [0, 1]")
    if spec.rule == "feature":
        x_adv = _feature_attack(spec, surrogate, batch, callback)
    else:
        x_adv = _momentum_attack(spec, surrogate, batch, pool, callback)
    return _finish(spec, surrogate, batch, x_adv)
