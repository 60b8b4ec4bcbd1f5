"""Experiment stages behind the command line.

Every stage reads its inputs from, and writes its outputs to, one output
directory::

    models/<name>.ckpt                    trained zoo
    advs/<KIND>/baseline.aesadv           default-hyperparameter session
    advs/<KIND>/<mode>-NN.aesadv          tune / rand member sessions
    soups/<KIND>/aes-<mode>[-<how>].aesadv
    zoo.csv report.csv flatness.csv basin.csv saturation.csv
    surfaces/<KIND>-<variant>.csv
    manifest.json                         config hash, seed, sha256 of every file

The run seed is added to every configured seed (data split, model inits,
soup base seed, flatness directions), so seed 0 reproduces the config as
written.
"""

import csv
import hashlib
import io
import json
import logging
import os
from pathlib import Path

from . import data as D
from . import evaluate as E
from . import models as M
from . import soup as S
from .archive import read_advbatch, write_advbatch
from .attacks import AttackSpec
from .config import ConfigError, parse_defense

log = logging.getLogger("soupforge")


class MissingInputError(ConfigError):
    """A stage was asked to run before the stage producing its inputs."""


# ---------------------------------------------------------------- helpers

def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _mkparent(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _require(path, stage):
    if not Path(path).exists():
        raise MissingInputError(f"missing {path}; run `{stage}` first")
    return path


def load_data(cfg, seed=0):
    """``(train, test)`` IDX datasets for the configured source."""
    src = cfg["data.source"]
    if src == "digits":
        ds = D.digits_dataset(cfg["data.size"])
    elif src == "synth":
        spec = D.SynthSpec(cfg["data.synth_classes"], cfg["data.size"],
                           cfg["data.synth_per_class"], cfg["data.synth_blobs"],
                           cfg["data.synth_margin"])
        ds = D.synth_dataset(spec, cfg["data.split_seed"] + seed)
    else:
        for key in ("data.images", "data.labels"):
            _require(cfg[key], "a dataset download")
        ds = D.load_idx(cfg["data.images"], cfg["data.labels"])
    return D.split(ds, cfg["data.test_fraction"], cfg["data.split_seed"] + seed)


def _arch(name, arch_name, shape, classes):
    return M.conv_arch(name, input_shape=shape, num_classes=classes, **M.ZOO_ARCHS[arch_name])


# ---------------------------------------------------------------- train

def train_zoo(cfg, seed, out):
    train_set, test_set = load_data(cfg, seed)
    tr, te = train_set.to_batch(), test_set.to_batch()
    classes = int(max(tr.labels.max(), te.labels.max())) + 1
    if cfg["data.source"] == "synth":
        classes = cfg["data.synth_classes"]
    shape = tr.images.shape[1:]
    zoo, rows = {}, []
    for name, m in sorted(cfg.models.items()):
        model_seed = m["seed"] + seed
        model = M.build_model(_arch(name, m["arch"], shape, classes), model_seed)
        common = dict(epochs=cfg["zoo.epochs"], lr=cfg["zoo.lr"], batch=cfg["zoo.batch"],
                      seed=model_seed, test=(te.images, te.labels))
        if m["adversarial"]:
            eps = cfg["zoo.adv_eps"]
            spec = AttackSpec(kind="IFGSM", eps=eps, alpha=eps, steps=1, seed=model_seed)
            model, acc = M.adversarial_train(model, tr.images, tr.labels, spec,
                                             cfg["zoo.adv_mix"], **common)
        else:
            model, acc = M.train(model, tr.images, tr.labels, **common)
        model.meta.update(config_hash=cfg.hash, seed=seed, name=name)
        log.info("trained %s (%s): test accuracy %.4f", name, m["arch"], acc)
        M.save(model, _mkparent(Path(out) / "models" / f"{name}.ckpt"))
        zoo[name] = model
        rows.append((name, m["arch"], model_seed, int(m["adversarial"]), float(acc)))
    _write_text(Path(out) / "zoo.csv", _csv(("model", "arch", "seed", "adversarial", "accuracy"), rows))
    return zoo


def load_zoo(cfg, seed, out):
    zoo = {}
    for name in sorted(cfg.models):
        model = M.load(_require(Path(out) / "models" / f"{name}.ckpt", "train"))
        if model.meta.get("config_hash") != cfg.hash or model.meta.get("seed") != seed:
            raise MissingInputError(f"models/{name}.ckpt was trained under a different "
                                    "config or seed; rerun `train`")
        zoo[name] = model
    return zoo


def attack_batch(cfg, seed, zoo):
    """First ``eval.max_images`` test images that the surrogate and every target get right."""
    _, test_set = load_data(cfg, seed)
    te = test_set.to_batch()
    judges = [zoo[cfg["zoo.surrogate"]]] + [zoo[t] for t in cfg["eval.targets"]]
    idx = E.correct_indices(te, judges)[:cfg["eval.max_images"]]
    if len(idx) == 0:
        raise RuntimeError("no test image is classified correctly by every model")
    return te.subset(idx)


# ---------------------------------------------------------------- attack

def sessions_for(cfg, seed, kind, mode):
    params = cfg.attack_params()
    base = cfg["soup.base_seed"] + seed
    if mode == "tune":
        name, values = S.TUNE_GRIDS[kind.upper()]
        return S.make_tune_sessions(kind, (name, values[:cfg["soup.m"]]), base,
                                    cfg["zoo.surrogate"], **params)
    return S.make_rand_sessions(kind, cfg["soup.m"], base, cfg["zoo.surrogate"], **params)


def baseline_session(cfg, seed, kind):
    spec = S.base_spec(kind, **cfg.attack_params())
    return S.SessionSpec(1, spec, cfg["soup.base_seed"] + seed, cfg["zoo.surrogate"])


def _adv_dir(out, kind):
    return Path(out) / "advs" / kind.upper()


def _all_kinds(cfg):
    kinds = list(cfg["soup.kinds"])
    return kinds + [k for k in cfg["soup.wild_kinds"] if k not in kinds]


def run_attacks(cfg, seed, out, zoo=None):
    zoo = zoo or load_zoo(cfg, seed, out)
    batch = attack_batch(cfg, seed, zoo)
    surrogate = zoo[cfg["zoo.surrogate"]]
    log.info("attacking %d images", len(batch))

    def run(session, path):
        adv = S.run_session(session, surrogate, batch)
        adv.provenance.update(config_hash=cfg.hash, run_seed=seed)
        write_advbatch(_mkparent(path), adv)

    for kind in _all_kinds(cfg):
        run(baseline_session(cfg, seed, kind), _adv_dir(out, kind) / "baseline.aesadv")
        if kind not in cfg["soup.kinds"]:
            continue
        for mode in cfg["soup.modes"]:
            for s in sessions_for(cfg, seed, kind, mode):
                run(s, _adv_dir(out, kind) / f"{mode}-{s.session_id:02d}.aesadv")
        log.info("%s sessions done", kind)


def load_members(cfg, out, kind, mode, m=None):
    m = cfg["soup.m"] if m is None else m
    return [read_advbatch(_require(_adv_dir(out, kind) / f"{mode}-{i:02d}.aesadv", "attack"))
            for i in range(1, m + 1)]


def load_baseline(out, kind):
    return read_advbatch(_require(_adv_dir(out, kind) / "baseline.aesadv", "attack"))


# ---------------------------------------------------------------- soup

def _soup_dir(out, kind):
    return Path(out) / "soups" / kind.upper()


def make_soups(cfg, seed, out):
    quantize = cfg["soup.quantize"]
    holdout = cfg["soup.holdout"]
    zoo = load_zoo(cfg, seed, out) if holdout or cfg["soup.wild_kinds"] else None
    for kind in cfg["soup.kinds"]:
        for mode in cfg["soup.modes"]:
            members = load_members(cfg, out, kind, mode)
            write_advbatch(_mkparent(_soup_dir(out, kind) / f"aes-{mode}.aesadv"),
                           S.average_uniform(members, quantize))
            if holdout:
                scores = [E.attack_success_rate(a, zoo[holdout]) for a in members]
                write_advbatch(_soup_dir(out, kind) / f"aes-{mode}-weighted.aesadv",
                               S.average_weighted(members, scores, holdout=holdout,
                                                  quantize=quantize))
                default = _default_index(cfg, seed, kind, mode, members)
                write_advbatch(_soup_dir(out, kind) / f"aes-{mode}-greedy.aesadv",
                               S.average_greedy(members, scores, cfg["soup.greedy_k"],
                                                seed=cfg["soup.base_seed"] + seed,
                                                default_index=default, holdout=holdout,
                                                quantize=quantize))
    if cfg["soup.wild_kinds"]:
        judge = zoo[holdout or cfg["eval.targets"][0]]
        cands = [load_baseline(out, k) for k in cfg["soup.wild_kinds"]]
        scores = [E.attack_success_rate(a, judge) for a in cands]
        write_advbatch(_mkparent(Path(out) / "soups" / "WILD" / "aes-wild.aesadv"),
                       S.wild_soup(cands, scores, cfg["soup.wild_gate"], quantize=quantize))


def _default_index(cfg, seed, kind, mode, members):
    """Member whose hyperparameters equal the defaults (the last one when none do)."""
    default = S.base_spec(kind, **cfg.attack_params()).to_dict()
    for i, s in enumerate(sessions_for(cfg, seed, kind, mode)):
        d = s.attack.to_dict()
        if all(d[k] == v for k, v in default.items() if k != "seed"):
            return i
    return len(members) - 1


def load_soups(cfg, out, kind):
    found = {}
    for path in sorted(_soup_dir(out, kind).glob("aes-*.aesadv")):
        found[path.stem] = read_advbatch(path)
    if not found:
        raise MissingInputError(f"no soups under {_soup_dir(out, kind)}; run `soup` first")
    return found


# ---------------------------------------------------------------- eval

def _targets(cfg, zoo, seed):
    targets = {t: zoo[t] for t in cfg["eval.targets"]}
    for d in cfg["eval.defenses"]:
        kind, value = parse_defense(d)
        for t in cfg["eval.targets"]:
            targets[f"{t}+{kind}{value}"] = E.Defended(zoo[t], (kind, value), seed)
    return targets


def _entries(cfg, out, kind):
    entries = [("baseline", load_baseline(out, kind))]
    for mode in cfg["soup.modes"]:
        for i, adv in enumerate(load_members(cfg, out, kind, mode), start=1):
            entries.append((f"{mode}-{i:02d}", adv))
    entries += sorted(load_soups(cfg, out, kind).items())
    return entries


def flatness_spec(cfg, seed):
    f = cfg.section("flatness")
    return E.FlatnessSpec(f["radius"], f["samples"], f["grid_range"], f["grid_step"],
                          f["seed"] + seed)


def evaluate_all(cfg, seed, out):
    zoo = load_zoo(cfg, seed, out)
    surrogate_id = cfg["zoo.surrogate"]
    surrogate = zoo[surrogate_id]
    targets = _targets(cfg, zoo, seed)
    fspec = flatness_spec(cfg, seed)
    report, flat_rows, basin_rows, sat_rows = [], [], [], []
    for kind in cfg["soup.kinds"]:
        entries = _entries(cfg, out, kind)
        for variant, adv in entries:
            per_image = E.flatness_probe(surrogate, adv.images, adv.labels, fspec)
            flat_rows += [(kind, variant, i, float(v)) for i, v in enumerate(per_image)]
            quality = E.stealth(adv)
            for name, target in targets.items():
                report.append({"surrogate": surrogate_id, "attack": kind, "variant": variant,
                               "target": name, "asr": E.attack_success_rate(adv, target),
                               "flatness": float(per_image.mean()), **quality})
        for mode in cfg["soup.modes"]:
            members = load_members(cfg, out, kind, mode)
            for t in cfg["eval.targets"]:
                table = E.basin_diagnostic(members, zoo[t])
                basin_rows += [(kind, mode, t, str(sid), f, lo, a) for sid, f, lo, a in table.rows]
                basin_rows.append((kind, mode, t, "mean", table.mean("feature"),
                                   table.mean("loss"), table.mean("asr")))
                basin_rows.append((kind, mode, t, "std", table.std("feature"),
                                   table.std("loss"), table.std("asr")))
            for m in cfg["soup.saturation"]:
                if m > len(members):
                    continue
                soup = S.average_uniform(members[:m], cfg["soup.quantize"])
                for t in cfg["eval.targets"]:
                    sat_rows.append((kind, mode, m, t, E.attack_success_rate(soup, zoo[t])))
    wild = Path(out) / "soups" / "WILD" / "aes-wild.aesadv"
    if cfg["soup.wild_kinds"]:
        entries = [(k, load_baseline(out, k)) for k in cfg["soup.wild_kinds"]]
        entries.append(("aes-wild", read_advbatch(_require(wild, "soup"))))
        for variant, adv in entries:
            quality = E.stealth(adv)
            flat = float(E.flatness_probe(surrogate, adv.images, adv.labels, fspec).mean())
            for name, target in targets.items():
                report.append({"surrogate": surrogate_id, "attack": "WILD", "variant": variant,
                               "target": name, "asr": E.attack_success_rate(adv, target),
                               "flatness": flat, **quality})
    _write_text(Path(out) / "report.csv", E.EvalReport(report).to_csv())
    _write_text(Path(out) / "flatness.csv",
                _csv(("attack", "variant", "image", "flatness"), flat_rows))
    _write_text(Path(out) / "basin.csv",
                _csv(("attack", "mode", "target", "session", "feature", "loss", "asr"), basin_rows))
    _write_text(Path(out) / "saturation.csv",
                _csv(("attack", "mode", "m", "target", "asr"), sat_rows))
    return E.EvalReport(report)


# ---------------------------------------------------------------- flatness surfaces

def surfaces(cfg, seed, out):
    zoo = load_zoo(cfg, seed, out)
    surrogate = zoo[cfg["zoo.surrogate"]]
    fspec = flatness_spec(cfg, seed)
    n = cfg["flatness.surface_images"]
    for kind in cfg["soup.kinds"]:
        picks = [("baseline", load_baseline(out, kind))] + sorted(load_soups(cfg, out, kind).items())
        for variant, adv in picks:
            rows = E.loss_surface(surrogate, adv.images[:n], adv.labels[:n], fspec)
            _write_text(Path(out) / "surfaces" / f"{kind.upper()}-{variant}.csv",
                        E.surface_csv(rows))


# ---------------------------------------------------------------- repro

def write_manifest(cfg, seed, out):
    files = {}
    for path in sorted(Path(out).rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            files[str(path.relative_to(out))] = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {"config_hash": cfg.hash, "seed": seed, "config": cfg.values, "files": files}
    _write_text(Path(out) / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def repro(cfg, seed, out):
    """Every stage in order, then the manifest."""
    os.makedirs(out, exist_ok=True)
    zoo = train_zoo(cfg, seed, out)
    run_attacks(cfg, seed, out, zoo)
    make_soups(cfg, seed, out)
    evaluate_all(cfg, seed, out)
    surfaces(cfg, seed, out)
    write_manifest(cfg, seed, out)


STAGES = {
    "train": train_zoo,
    "attack": run_attacks,
    "soup": make_soups,
    "eval": evaluate_all,
    "flatness": surfaces,
    "repro": repro,
}
