"""Small convolutional classifiers: build, train, persist, and ensemble.

Every model is a chain of layers described by an :class:`ArchDescriptor`.
Parameters live in a plain ``dict`` of numpy arrays so that checkpoints,
copies and dtype casts stay trivial.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T

MAGIC = b"AESCKPT1"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | pool | flatten | dense
    size: int = 0  # output channels, pool size, or dense units
    kernel: int = 0
    inputs: int | None = None  # declared dense fan-in, validated when given
    relu: bool = True


@dataclass(frozen=True)
class ArchDescriptor:
    name: str
    input_shape: tuple
    num_classes: int
    layers: tuple
    tap: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, Layer) else Layer(**l) for l in self.layers))
        if self.tap is None:
            convs = [lid for lid, l in zip(self.layer_ids, self.layers) if l.kind == "conv"]
            object.__setattr__(self, "tap", convs[-1] if convs else self.layer_ids[0])
        self.shapes()  # validate

    @property
    def layer_ids(self):
        return [f"{l.kind}{i}" for i, l in enumerate(self.layers)]

    def shapes(self):
        """Per-layer output shapes (without batch axis); raises on mismatch."""
        if self.tap not in self.layer_ids:
            raise ValueError(f"feature tap {self.tap!r} is not a layer id")
        shape = self.input_shape
        out = []
        for lid, layer in zip(self.layer_ids, self.layers):
            if layer.kind == "conv":
                if len(shape) != 3 or layer.kernel % 2 == 0:
                    raise ValueError(f"{lid}: conv needs (C, H, W) input and odd kernel")
                shape = (layer.size, shape[1], shape[2])
            elif layer.kind == "pool":
                if len(shape) != 3 or shape[1] % layer.size or shape[2] % layer.size:
                    raise ValueError(f"{lid}: pool size {layer.size} does not divide {shape}")
                shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise ValueError(f"{lid}: dense layer needs flattened input")
                if layer.inputs is not None and layer.inputs != shape[0]:
                    raise ValueError(
                        f"{lid}: declared {layer.inputs} inputs but receives {shape[0]}")
                shape = (layer.size,)
            else:
                raise ValueError(f"{lid}: unknown layer kind {layer.kind!r}")
            out.append(shape)
        if shape != (self.num_classes,):
            raise ValueError(f"final shape {shape} != ({self.num_classes},)")
        return out

    @property
    def tap_shape(self):
        return self.shapes()[self.layer_ids.index(self.tap)]

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "layers": tuple(Layer(**l) for l in d["layers"])})


def conv_arch(name, input_shape=(1, 16, 16), num_classes=10, depth=1, width=8, hidden=32):
    """Reference conv family: ``depth`` conv+pool stages of ``width * 2**i`` channels."""
    layers = []
    for i in range(depth):
        layers.append(Layer("conv", width * 2 ** i, kernel=3))
        layers.append(Layer("pool", 2))
    layers += [Layer("flatten"), Layer("dense", hidden), Layer("dense", num_classes, relu=False)]
    tap = f"conv{2 * depth - 2}"
    return ArchDescriptor(name, input_shape, num_classes, tuple(layers), tap)


def dense_arch(name, input_shape, num_classes, hidden=()):
    layers = [Layer("flatten")]
    layers += [Layer("dense", h) for h in hidden]
    layers.append(Layer("dense", num_classes, relu=False))
    return ArchDescriptor(name, input_shape, num_classes, tuple(layers), "flatten0")


ZOO_ARCHS = {
    "conv1-w8": dict(depth=1, width=8),
    "conv1-w16": dict(depth=1, width=16),
    "conv2-w8": dict(depth=2, width=8),
    "conv2-w16": dict(depth=2, width=16),
}


class Model:
    """Parameters plus the descriptor that says how to use them."""

    def __init__(self, arch, params, meta=None):
        self.arch = arch
        self.params = params
        self.meta = dict(meta or {})

    @property
    def num_classes(self):
        return self.arch.num_classes

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self):
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()}, self.meta)

    def astype(self, dtype):
        return Model(self.arch, {k: v.astype(dtype) for k, v in self.params.items()}, self.meta)

    def _run(self, x, params, start=0, stop=None):
        layers = self.arch.layers
        ids = self.arch.layer_ids
        stop = len(layers) if stop is None else stop
        h = x
        for lid, layer in zip(ids[start:stop], layers[start:stop]):
            if layer.kind == "conv":
                h = T.relu(T.conv2d(h, params[f"{lid}.w"], params[f"{lid}.b"]))
            elif layer.kind == "pool":
                h = T.avg_pool(h, layer.size)
            elif layer.kind == "flatten":
                h = T.flatten(h)
            else:
                h = T.add(T.matmul(h, params[f"{lid}.w"]), params[f"{lid}.b"])
                if layer.relu:
                    h = T.relu(h)
        return h

    def _check(self, x):
        data = x.data if isinstance(x, T.Tensor) else np.asarray(x)
        if data.shape[1:] != self.arch.input_shape:
            raise T.ShapeError(f"image shape {data.shape[1:]} != {self.arch.input_shape}")
        return x if isinstance(x, T.Tensor) else T.Tensor(data)

    def logits(self, x, params=None):
        """Forward pass; returns a tensor, tracked when ``x`` (or params) is."""
        return self._run(self._check(x), params or self.params)

    def features(self, x, params=None):
        """Activation at the descriptor's feature tap."""
        stop = self.arch.layer_ids.index(self.arch.tap) + 1
        return self._run(self._check(x), params or self.params, 0, stop)

    def head(self, f, params=None):
        """Remaining layers from the feature tap to the logits."""
        start = self.arch.layer_ids.index(self.arch.tap) + 1
        return self._run(f, params or self.params, start)

    def loss(self, images, labels, reduction="none"):
        return T.softmax_cross_entropy(self.logits(images), labels, reduction).data

    def predict(self, images, batch=512):
        out = [self.logits(images[i:i + batch]).data.argmax(axis=1)
               for i in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def accuracy(self, images, labels):
        return float(np.mean(self.predict(images) == labels))


def ensemble_logits(models, images):
    """Unweighted mean of member logits; gradients flow through all members."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    classes = {m.num_classes for m in models}
    if len(classes) != 1:
        raise ValueError(f"class counts differ across ensemble: {sorted(classes)}")
    total = models[0].logits(images)
    for m in models[1:]:
        total = T.add(total, m.logits(images))
    if len(models) == 1:
        return total
    return T.scale(total, 1.0 / len(models))


class Ensemble:
    """Logit-averaging surrogate with the same interface as :class:`Model`."""

    def __init__(self, models):
        ensemble_logits(models, np.zeros((0, *models[0].arch.input_shape)))
        self.models = list(models)
        self.arch = models[0].arch

    @property
    def num_classes(self):
        return self.models[0].num_classes

    def logits(self, x):
        return ensemble_logits(self.models, x)

    def features(self, x):
        raise TypeError("an ensemble has no single feature tap")

    def loss(self, images, labels, reduction="none"):
        return T.softmax_cross_entropy(self.logits(images), labels, reduction).data

    def predict(self, images, batch=512):
        out = [self.logits(images[i:i + batch]).data.argmax(axis=1)
               for i in range(0, len(images), batch)]
        return np.concatenate(out)


def build_model(arch, seed, dtype=np.float32):
    """Seeded uniform He-style init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    shapes = arch.shapes()
    params = {}
    prev = arch.input_shape
    for lid, layer, shape in zip(arch.layer_ids, arch.layers, shapes):
        if layer.kind == "conv":
            fan_in = prev[0] * layer.kernel ** 2
            w_shape = (layer.size, prev[0], layer.kernel, layer.kernel)
        elif layer.kind == "dense":
            fan_in = prev[0]
            w_shape = (prev[0], layer.size)
        else:
            prev = shape
            continue
        bound = np.sqrt(6.0 / fan_in)
        params[f"{lid}.w"] = rng.uniform(-bound, bound, size=w_shape).astype(dtype)
        params[f"{lid}.b"] = np.zeros(layer.size, dtype=dtype)
        prev = shape
    return Model(arch, params, {"seed": seed})


def _sgd_step(model, params, images, labels, lr):
    tape = T.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}
    loss = T.softmax_cross_entropy(model.logits(images, leaves), labels)
    grads = tape.gradient(loss, *leaves.values())
    step = params[next(iter(params))].dtype.type(lr)
    for (k, v), g in zip(params.items(), grads):
        params[k] = v - step * g
    return float(loss.data)


def train(model, images, labels, epochs=5, lr=0.1, batch=64, seed=0, test=None,
          adversary=None):
    """Minibatch SGD with seeded shuffling.

    Returns ``(trained_model, accuracy)`` where accuracy is measured on
    ``test = (images, labels)`` when given, else on the training data.
    ``adversary``, when set, is a callable ``(model, images, labels, step)``
    returning the batch actually used for the update.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if labels.max() >= model.num_classes or labels.min() < 0:
        raise ValueError("labels out of range for this model")
    out = model.copy()
    params = out.params
    images = images.astype(model.dtype, copy=False)
    order_rng = np.random.default_rng(seed)
    step = 0
    for _ in range(epochs):
        order = order_rng.permutation(len(images))
        for start in range(0, len(images), batch):
            idx = order[start:start + batch]
            xb, yb = images[idx], labels[idx]
            if adversary is not None:
                xb = adversary(out, xb, yb, step)
            _sgd_step(out, params, xb, yb, lr)
            step += 1
    eval_x, eval_y = test if test is not None else (images, labels)
    acc = out.accuracy(eval_x, eval_y)
    out.meta = {**model.meta, "accuracy": acc, "train_seed": seed}
    return out, acc


def adversarial_train(model, images, labels, attack, mix_ratio=0.5, epochs=5, lr=0.1,
                      batch=64, seed=0, test=None):
    """Train on batches where a ``mix_ratio`` share of images is freshly attacked.

    The attacked share is crafted against the model being trained, with
    per-step seeds derived from ``attack.seed`` so the shuffling stream of
    :func:`train` is left untouched.
    """
    from .attacks import run_attack
    from .data import ImageBatch

    if not 0.0 <= mix_ratio <= 1.0:
        raise ValueError("mix_ratio must lie in [0, 1]")
    if mix_ratio == 0:
        return train(model, images, labels, epochs, lr, batch, seed, test)

    def adversary(current, xb, yb, step):
        n_adv = int(round(mix_ratio * len(xb)))
        if n_adv == 0:
            return xb
        spec = attack.replace(seed=int(attack.seed) * 1_000_003 + step)
        adv = run_attack(spec, current, ImageBatch(xb[:n_adv], yb[:n_adv]))
        out = xb.copy()
        out[:n_adv] = adv.images
        return out

    return train(model, images, labels, epochs, lr, batch, seed, test, adversary)


def check_gradients(model, images, labels, tolerance=1e-4, coords=10, seed=0):
    """Finite-difference check of input and parameter gradients in 64-bit."""
    m64 = model.astype(np.float64)
    names = list(m64.params)

    def fn(x, *ps):
        return T.softmax_cross_entropy(m64.logits(x, dict(zip(names, ps))), labels)

    arrays = [np.asarray(images, dtype=np.float64)] + [m64.params[n] for n in names]
    return T.gradient_check(fn, arrays, tolerance, coords, seed=seed)


# ---------------------------------------------------------------- checkpoints

def save(model, path):
    names = list(model.params)
    header = {
        "arch": model.arch.to_dict(),
        "meta": model.meta,
        "params": [[n, list(model.params[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f4").tobytes())


def load(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + n:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    arch = ArchDescriptor.from_dict(header["arch"])
    offset = 12 + n
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {name} at byte {offset}")
        params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset) \
            .reshape(shape).astype(np.float32)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Model(arch, params, header["meta"])
