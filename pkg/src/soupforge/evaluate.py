"""Measurements on adversarial batches.

Success rates and transfer matrices, the two perceptual scores (PSNR and
SSIM), loss-flatness probes, the session-spread diagnostic, and the two
input-preprocessing defenses (bit-depth reduction and random resize-pad).
"""

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .attacks import dim_index

PSNR_CAP = 99.0
REPORT_COLUMNS = ("surrogate", "attack", "variant", "target", "asr", "l2", "linf", "psnr",
                  "ssim", "flatness")


# ---------------------------------------------------------------- success rates

def _predict(target, images):
    return target.predict(images)


def mispredicted(adv, target):
    """Boolean flag per image: the target's top-1 label differs from the truth."""
    return _predict(target, adv.images) != adv.labels


def attack_success_rate(adv, target):
    """Percentage of images the target misclassifies."""
    if len(adv.labels) == 0:
        raise ValueError("empty batch")
    return 100.0 * float(np.mean(mispredicted(adv, target)))


def correct_indices(batch, models):
    """Indices of images every model in ``models`` classifies correctly."""
    ok = np.ones(len(batch), dtype=bool)
    for m in models:
        ok &= m.predict(batch.images) == batch.labels
    return np.flatnonzero(ok)


# ---------------------------------------------------------------- defenses

def bit_reduction(x, bits):
    """Quantize [0, 1] pixels to ``bits`` bits."""
    if bits < 1:
        raise ValueError("bits must be >= 1")
    levels = 2 ** bits - 1
    return (np.round(np.asarray(x, dtype=np.float64) * levels) / levels).astype(np.asarray(x).dtype)


def random_resize_pad(x, seed, growth):
    """Seeded nearest resize to ``[H, H+growth]``, zero-pad to ``H+growth``, resize back.

    One draw per call, shared by the whole batch.
    """
    if growth < 0:
        raise ValueError("growth must be >= 0")
    if growth == 0:
        return x
    h, w = x.shape[-2:]
    rng = np.random.default_rng(seed)
    size = int(rng.integers(h, h + growth, endpoint=True))
    top = int(rng.integers(0, h + growth - size, endpoint=True))
    left = int(rng.integers(0, h + growth - size, endpoint=True))
    index = dim_index(h, w, (h + growth) / h, size, top, left)
    return T.take(T.Tensor(x), index).data


class Defended:
    """A target behind an input-preprocessing defense.

    ``defense`` is ``("bitred", bits)`` or ``("rp", growth)``; R&P draws are
    seeded by ``seed`` and advance once per :meth:`predict` call.
    """

    def __init__(self, model, defense, seed=0):
        kind, value = defense
        if kind not in ("bitred", "rp"):
            raise ValueError(f"unknown defense {kind!r}")
        self.model, self.kind, self.value, self.seed = model, kind, int(value), int(seed)
        self.arch = model.arch

    def preprocess(self, x):
        if self.kind == "bitred":
            return bit_reduction(x, self.value)
        return random_resize_pad(x, self.seed, self.value)

    def predict(self, images, batch=512):
        return self.model.predict(self.preprocess(images), batch)


# ---------------------------------------------------------------- perceptual scores

def mse(x, y):
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.mean(d * d))


def psnr(x, y):
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99."""
    err = mse(x, y)
    if err < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))


def gaussian_window(size=11, sigma=1.5):
    r = size // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(x, y, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity of two (C, H, W) or (H, W) images in [0, 1].

    Local statistics use a Gaussian window with reflected borders; the mean
    is taken over the interior where the window fits, per channel.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise T.ShapeError(f"ssim shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    kernel = gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    pad = (window - 1) // 2
    scores = []
    for a, b in zip(x, y):
        def blur(z):
            return ndimage.correlate(z, kernel, mode="reflect")
        mu_a, mu_b = blur(a), blur(b)
        var_a = blur(a * a) - mu_a ** 2
        var_b = blur(b * b) - mu_b ** 2
        cov = blur(a * b) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)
             / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
        inner = s[pad:s.shape[0] - pad, pad:s.shape[1] - pad]
        scores.append(inner.mean() if inner.size else s.mean())
    return float(np.mean(scores))


def stealth(adv):
    """Mean l2, max linf, mean PSNR and mean SSIM of a batch's perturbations."""
    p = [psnr(o, a) for o, a in zip(adv.originals, adv.images)]
    s = [ssim(o, a) for o, a in zip(adv.originals, adv.images)]
    return {"l2": float(np.mean(adv.l2)), "linf": float(adv.linf.max(initial=0.0)),
            "psnr": float(np.mean(p)), "ssim": float(np.mean(s))}


# ---------------------------------------------------------------- flatness

@dataclass(frozen=True)
class FlatnessSpec:
    radius: float = 0.1
    samples: int = 100
    grid_range: float = 0.5
    grid_step: float = 0.025
    seed: int = 0
    full: bool = False  # sample fresh random directions per point instead of one plane

    def __post_init__(self):
        if self.radius <= 0 or self.samples < 1 or self.grid_step <= 0:
            raise ValueError("need radius > 0, samples >= 1, grid_step > 0")

    def directions(self, shape):
        """Two orthonormal directions of image ``shape`` (Gram-Schmidt on seeded normals)."""
        rng = np.random.default_rng(self.seed)
        u = rng.normal(size=shape)
        v = rng.normal(size=shape)
        u /= np.linalg.norm(u)
        v -= np.sum(u * v) * u
        v /= np.linalg.norm(v)
        return u, v

    def grid(self):
        n = int(round(2 * self.grid_range / self.grid_step))
        return -self.grid_range + self.grid_step * np.arange(n + 1)


def _loss_fn(model):
    if callable(model) and not hasattr(model, "loss"):
        return model
    return lambda x, y: model.loss(x, y)


def flatness_probe(model, images, labels, spec=FlatnessSpec()):
    """Mean absolute loss change at ``spec.radius`` around each image.

    ``model`` is a classifier or a callable ``loss(x, y) -> per-image loss``.
    Lower values mean a flatter neighbourhood.
    """
    loss = _loss_fn(model)
    x = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    dtype = np.asarray(images).dtype
    center = np.asarray(loss(x.astype(dtype), labels), dtype=np.float64)
    rng = np.random.default_rng([spec.seed, 1])
    angles = rng.uniform(0.0, 2 * np.pi, size=spec.samples)
    total = np.zeros(len(x))
    if not spec.full:
        u, v = spec.directions(x.shape[1:])
    for k, theta in enumerate(angles):
        if spec.full:
            d = rng.normal(size=x.shape[1:])
            step = spec.radius * d / np.linalg.norm(d)
        else:
            step = spec.radius * (np.cos(theta) * u + np.sin(theta) * v)
        probe = np.asarray(loss((x + step).astype(dtype), labels), dtype=np.float64)
        total += np.abs(center - probe)
    return total / spec.samples


def loss_surface(model, images, labels, spec=FlatnessSpec()):
    """Batch-mean loss over the ``[-range, range]^2`` grid; rows of (u, v, loss)."""
    loss = _loss_fn(model)
    x = np.asarray(images, dtype=np.float64)
    dtype = np.asarray(images).dtype
    u, v = spec.directions(x.shape[1:])
    rows = []
    for a in spec.grid():
        for b in spec.grid():
            z = (x + a * u + b * v).astype(dtype)
            rows.append((float(a), float(b), float(np.mean(loss(z, labels)))))
    return rows


def surface_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("u", "v", "loss"))
    for a, b, val in rows:
        w.writerow((f"{a:.4f}", f"{b:.4f}", f"{val:.4f}"))
    return buf.getvalue()


# ---------------------------------------------------------------- basin diagnostic

@dataclass
class BasinTable:
    rows: list  # (session_id, feature, loss, asr)

    def column(self, name):
        i = {"feature": 1, "loss": 2, "asr": 3}[name]
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def mean(self, name):
        return float(self.column(name).mean())

    def std(self, name):
        """Population standard deviation across sessions."""
        return float(self.column(name).std())


def basin_diagnostic(advs, target):
    """Per session: mean feature-tap l2 norm on ``target``, mean target loss, and ASR."""
    rows = []
    for adv in advs:
        f = target.features(adv.images).data.reshape(len(adv.labels), -1).astype(np.float64)
        feature = float(np.sqrt((f * f).sum(axis=1)).mean())
        loss = float(np.mean(target.loss(adv.images, adv.labels)))
        rows.append((adv.session_id, feature, loss, attack_success_rate(adv, target)))
    return BasinTable(rows)


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    rows: list  # dicts keyed by REPORT_COLUMNS

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r[c] if isinstance(r[c], str) else f"{r[c]:.4f}" for c in REPORT_COLUMNS])
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    def lookup(self, **match):
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]


def transfer_matrix(entries, targets, flatness_model=None, flatness_spec=FlatnessSpec()):
    """One row per (entry, target) in input order.

    ``entries`` are ``(surrogate_id, attack, variant, AdvBatch)`` tuples and
    ``targets`` maps target ids to classifiers.  Flatness is measured on
    ``flatness_model`` (usually the surrogate) and left NaN without one.
    """
    rows = []
    for surrogate, attack, variant, adv in entries:
        quality = stealth(adv)
        flat = float("nan")
        if flatness_model is not None:
            flat = float(np.mean(flatness_probe(flatness_model, adv.images, adv.labels,
                                                flatness_spec)))
        for name, target in targets.items():
            rows.append({"surrogate": surrogate, "attack": attack, "variant": variant,
                         "target": name, "asr": attack_success_rate(adv, target),
                         "flatness": flat, **quality})
    return EvalReport(rows)
