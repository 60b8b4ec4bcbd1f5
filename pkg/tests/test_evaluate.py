import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from soupforge import evaluate as E
from soupforge.attacks import AdvBatch, AttackSpec, run_attack


class FixedPredictor:
    def __init__(self, preds):
        self.preds = np.asarray(preds)

    def predict(self, images):
        return self.preds[:len(images)]


def batch_of(n, labels=None):
    x = np.zeros((n, 1, 2, 2), np.float32)
    return AdvBatch(x, x, np.arange(n) % 3 if labels is None else np.asarray(labels))


def test_asr_matches_hand_count():
    adv = batch_of(10, [0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
    preds = [0, 2, 2, 1, 1, 0, 0, 1, 1, 0]
    flags = [p != y for p, y in zip(preds, adv.labels)]
    assert E.attack_success_rate(adv, FixedPredictor(preds)) == pytest.approx(100 * sum(flags) / 10)
    assert E.attack_success_rate(adv, FixedPredictor(adv.labels)) == 0.0


def test_clean_batch_asr_is_clean_error(small_model, blobs):
    idx = np.arange(30)
    sub = blobs.subset(idx)
    adv = run_attack(AttackSpec(eps=0.0, alpha=0.01, steps=1), small_model, sub)
    err = 100 * np.mean(small_model.predict(sub.images) != sub.labels)
    assert E.attack_success_rate(adv, small_model) == pytest.approx(err)


def test_correct_indices(small_model, blobs):
    idx = E.correct_indices(blobs, [small_model])
    assert np.all(small_model.predict(blobs.images[idx]) == blobs.labels[idx])


def test_psnr_closed_forms():
    x = np.zeros((1, 4, 4))
    assert E.psnr(x, x) == 99.0
    assert E.psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert E.psnr(x, x + 0.2) < E.psnr(x, x + 0.1)


@pytest.mark.parametrize("shape", [(16, 16), (1, 16, 16), (3, 24, 20)])
def test_ssim_matches_scikit_image(shape):
    rng = np.random.default_rng(0)
    a = rng.random(shape)
    b = np.clip(a + rng.normal(0, 0.05, shape), 0, 1)
    kw = dict(channel_axis=0) if len(shape) == 3 else {}
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, **kw)
    assert E.ssim(a, b) == pytest.approx(ref, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_ssim_identity_symmetry_and_range(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((1, 12, 12)), rng.random((1, 12, 12))
    assert E.ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert E.ssim(a, b) == pytest.approx(E.ssim(b, a), abs=1e-12)
    assert -1 <= E.ssim(a, b) <= 1


def test_bit_reduction():
    x = np.array([0.4, 0.6, 0.0, 1.0])
    assert E.bit_reduction(x, 1).tolist() == [0.0, 1.0, 0.0, 1.0]
    grid = np.arange(256) / 255.0
    assert np.array_equal(E.bit_reduction(grid, 8), grid)
    once = E.bit_reduction(np.random.default_rng(0).random(50), 3)
    assert np.array_equal(E.bit_reduction(once, 3), once)


def test_random_resize_pad():
    x = np.random.default_rng(0).random((2, 1, 8, 8)).astype(np.float32)
    assert E.random_resize_pad(x, 0, 0) is x
    a, b = E.random_resize_pad(x, 4, 3), E.random_resize_pad(x, 4, 3)
    assert np.array_equal(a, b) and a.shape == x.shape
    with pytest.raises(ValueError):
        E.random_resize_pad(x, 0, -1)


def test_defended_targets(small_model, blobs):
    sub = blobs.subset(np.arange(40))
    adv = run_attack(AttackSpec(kind="MI", eps=0.15, alpha=0.015), small_model, sub)
    bare = E.attack_success_rate(adv, small_model)
    shielded = E.attack_success_rate(adv, E.Defended(small_model, ("bitred", 2)))
    assert shielded <= bare
    rp = E.Defended(small_model, ("rp", 2), seed=0)
    assert np.array_equal(rp.predict(adv.images), rp.predict(adv.images))
    assert np.array_equal(E.Defended(small_model, ("bitred", 8)).predict(sub.images),
                          small_model.predict(sub.images))
    with pytest.raises(ValueError):
        E.Defended(small_model, ("jpeg", 75))


def test_flatness_of_constant_loss_is_zero():
    x = np.random.default_rng(0).random((3, 1, 4, 4))
    flat = E.flatness_probe(lambda z, y: np.full(len(z), 2.5), x, np.zeros(3, int))
    assert np.array_equal(flat, np.zeros(3))


@pytest.mark.parametrize("full", [False, True])
def test_flatness_of_quadratic_is_c_r_squared(full):
    x = np.random.default_rng(1).random((2, 1, 5, 5))
    c = 3.0

    def loss(z, y):
        return c * ((z - x) ** 2).reshape(len(z), -1).sum(1)

    spec = E.FlatnessSpec(radius=0.1, samples=100, full=full)
    np.testing.assert_allclose(E.flatness_probe(loss, x, np.zeros(2, int), spec), c * 0.01,
                               atol=1e-6)


def test_flatness_spec_defaults_and_directions():
    spec = E.FlatnessSpec()
    assert (spec.radius, spec.samples, spec.grid_step, spec.grid_range) == (0.1, 100, 0.025, 0.5)
    u, v = spec.directions((1, 4, 4))
    assert np.linalg.norm(u) == pytest.approx(1) and np.linalg.norm(v) == pytest.approx(1)
    assert abs(np.sum(u * v)) < 1e-12
    assert len(spec.grid()) == 41
    with pytest.raises(ValueError):
        E.FlatnessSpec(radius=0)


def test_loss_surface_centre_is_batch_loss(small_model, blobs):
    sub = blobs.subset(np.arange(4))
    spec = E.FlatnessSpec(grid_range=0.5, grid_step=0.5)
    rows = E.loss_surface(small_model, sub.images, sub.labels, spec)
    assert len(rows) == 9
    centre = [r for r in rows if r[0] == 0 and r[1] == 0][0][2]
    assert centre == pytest.approx(float(small_model.loss(sub.images, sub.labels).mean()), rel=1e-6)
    text = E.surface_csv(rows)
    assert text.startswith("u,v,loss\n") and text.count("\n") == 10


def test_basin_diagnostic_enumeration(small_model, blobs):
    sub = blobs.subset(np.arange(10))
    a = run_attack(AttackSpec(kind="MI", eps=0.05, alpha=0.01, seed=1), small_model, sub)
    b = run_attack(AttackSpec(kind="MI", eps=0.1, alpha=0.01, seed=1), small_model, sub)
    a.provenance["session_id"], b.provenance["session_id"] = 1, 2
    table = E.basin_diagnostic([a, b], small_model)
    asr = [E.attack_success_rate(x, small_model) for x in (a, b)]
    loss = [float(small_model.loss(x.images, x.labels).mean()) for x in (a, b)]
    assert table.mean("asr") == pytest.approx(np.mean(asr))
    assert table.std("loss") == pytest.approx(abs(loss[0] - loss[1]) / 2)
    same = E.basin_diagnostic([a, a, a], small_model)
    assert same.std("asr") == 0 and same.std("loss") == 0 and same.std("feature") == 0


def test_report_csv_format(small_model, blobs):
    sub = blobs.subset(np.arange(6))
    adv = run_attack(AttackSpec(kind="MI", eps=0.1, alpha=0.01), small_model, sub)
    report = E.transfer_matrix([("A", "MI", "baseline", adv)],
                               {"B": small_model, "C": small_model, "D": small_model},
                               flatness_model=small_model,
                               flatness_spec=E.FlatnessSpec(samples=5))
    text = report.to_csv()
    lines = text.split("\n")
    assert lines[0] == "surrogate,attack,variant,target,asr,l2,linf,psnr,ssim,flatness"
    assert len(report.rows) == 3 and text.endswith("\n") and "\r" not in text
    fields = lines[1].split(",")
    assert fields[:4] == ["A", "MI", "baseline", "B"]
    assert all(len(f.split(".")[1]) == 4 for f in fields[4:])
    again = E.transfer_matrix([("A", "MI", "baseline", adv)],
                              {"B": small_model, "C": small_model, "D": small_model},
                              flatness_model=small_model, flatness_spec=E.FlatnessSpec(samples=5))
    assert again.to_csv() == text
    for r in report.rows:
        assert 0 <= r["asr"] <= 100 and r["linf"] <= 0.1 + 1e-6 and -1 <= r["ssim"] <= 1
