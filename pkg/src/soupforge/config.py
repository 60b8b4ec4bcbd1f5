"""Experiment configuration: TOML with flat dotted keys over packaged defaults.

A user file only needs the keys it changes.  Keys under ``models.`` are the
exception: if the file names any model, the default zoo is replaced rather
than merged.  Extra ``attack.<field>`` keys override any attack
hyperparameter.
"""

import hashlib
import json
from dataclasses import fields
from importlib import resources

import tomli

from .attacks import AttackSpec

MODEL_KEYS = {"arch": str, "seed": int, "adversarial": bool}


class ConfigError(ValueError):
    pass


def flatten(tree, prefix=""):
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _parse(text, source):
    try:
        return flatten(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def defaults():
    text = resources.files("soupforge").joinpath("resources/default.toml").read_text()
    return _parse(text, "default.toml")


def _check_type(key, value, expected):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"{key}: expected int, got bool")
    if not isinstance(value, expected):
        raise ConfigError(f"{key}: expected {expected.__name__}, got {type(value).__name__}")
    return value


_ATTACK_FIELDS = {f.name: f for f in fields(AttackSpec)}


def _expected_type(key, base):
    if key in base:
        return type(base[key])
    parts = key.split(".")
    if parts[0] == "models" and len(parts) == 3 and parts[2] in MODEL_KEYS:
        return MODEL_KEYS[parts[2]]
    if parts[0] == "attack" and len(parts) == 2 and parts[1] in _ATTACK_FIELDS:
        default = getattr(AttackSpec(), parts[1])
        return float if default is None else type(default)
    raise ConfigError(f"unknown config key {key!r}")


class Config:
    """Resolved flat configuration with a stable content hash."""

    def __init__(self, values):
        self.values = dict(sorted(values.items()))
        self._validate()

    @classmethod
    def load(cls, path=None, text=None, overrides=None):
        base = defaults()
        user = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    user = _parse(fh.read(), str(path))
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
        elif text is not None:
            user = _parse(text, "<text>")
        user.update(overrides or {})
        merged = dict(base)
        if any(k.startswith("models.") for k in user):
            merged = {k: v for k, v in merged.items() if not k.startswith("models.")}
        for key, value in user.items():
            merged[key] = _check_type(key, value, _expected_type(key, base))
        return cls(merged)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def section(self, prefix):
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    @property
    def models(self):
        """``{name: {"arch", "seed", "adversarial"}}`` in declaration-independent sorted order."""
        out = {}
        for key, value in self.section("models").items():
            name, field = key.split(".")
            out.setdefault(name, {"adversarial": False})[field] = value
        return out

    def attack_params(self):
        return dict(self.section("attack"))

    @property
    def hash(self):
        """sha256 of the canonical config, ignoring where outputs go."""
        payload = {k: v for k, v in self.values.items() if k != "output.dir"}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def _validate(self):
        v = self.values
        from .models import ZOO_ARCHS

        if v["data.source"] not in ("digits", "synth", "idx"):
            raise ConfigError(f"data.source must be digits, synth or idx, got {v['data.source']!r}")
        if v["data.source"] == "idx" and not (v["data.images"] and v["data.labels"]):
            raise ConfigError("data.source = 'idx' needs data.images and data.labels")
        if not 0 < v["data.test_fraction"] < 1:
            raise ConfigError("data.test_fraction must lie in (0, 1)")
        models = self.models
        if not models:
            raise ConfigError("no models configured")
        for name, m in models.items():
            if "arch" not in m or "seed" not in m:
                raise ConfigError(f"models.{name} needs arch and seed")
            if m["arch"] not in ZOO_ARCHS:
                raise ConfigError(f"models.{name}.arch: unknown {m['arch']!r}; "
                                  f"choose from {sorted(ZOO_ARCHS)}")
        if v["zoo.surrogate"] not in models:
            raise ConfigError(f"zoo.surrogate {v['zoo.surrogate']!r} is not a configured model")
        for t in v["eval.targets"]:
            if t not in models:
                raise ConfigError(f"eval target {t!r} is not a configured model")
        if v["soup.holdout"] and v["soup.holdout"] not in models:
            raise ConfigError(f"soup.holdout {v['soup.holdout']!r} is not a configured model")
        if v["soup.m"] < 1:
            raise ConfigError("soup.m must be >= 1")
        if not v["soup.kinds"]:
            raise ConfigError("soup.kinds must not be empty")
        from .soup import TUNE_GRIDS

        for kind in list(v["soup.kinds"]) + list(v["soup.wild_kinds"]):
            if kind.upper() not in TUNE_GRIDS:
                raise ConfigError(f"unknown attack kind {kind!r}")
        for mode in v["soup.modes"]:
            if mode not in ("tune", "rand"):
                raise ConfigError(f"soup mode must be tune or rand, got {mode!r}")
        if "tune" in v["soup.modes"] and v["soup.m"] > 10:
            raise ConfigError("tune soups have at most 10 grid values")
        if not 1 <= v["soup.greedy_k"] <= v["soup.m"]:
            raise ConfigError("soup.greedy_k must lie in [1, soup.m]")
        for d in v["eval.defenses"]:
            parse_defense(d)
        if v["eval.max_images"] < 1:
            raise ConfigError("eval.max_images must be >= 1")
        try:
            self.attack_spec("MI")
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"attack: {exc}") from None

    def attack_spec(self, kind):
        return AttackSpec(kind=kind, **self.attack_params())


def parse_defense(text):
    """``"bitred:4"`` -> ``("bitred", 4)``; ``"rp:2"`` -> ``("rp", 2)``."""
    kind, _, value = str(text).partition(":")
    if kind not in ("bitred", "rp") or not value.isdigit():
        raise ConfigError(f"bad defense {text!r}; use bitred:<bits> or rp:<growth>")
    return kind, int(value)
