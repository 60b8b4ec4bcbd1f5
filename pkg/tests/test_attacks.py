import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soupforge import attacks as A
from soupforge import tensor as T
from soupforge.data import ImageBatch

EPS = 0.1


@pytest.fixture(scope="module")
def batch(blobs):
    return blobs.subset(np.arange(12))


def run(spec, model, batch, **kw):
    return A.run_attack(spec, model, batch, **kw).images


FAST = dict(n_vmi=3, n_pgn=3, n_ssa=3, n_ens=3, n_integrated=3, n_scales=3, mix_count=2)


@pytest.mark.parametrize("kind", A.KINDS)
def test_every_kind_respects_budget_and_box(kind, small_model, batch):
    spec = A.AttackSpec(kind=kind, eps=EPS, alpha=EPS / 4, steps=4, seed=3, **FAST)
    adv = A.run_attack(spec, small_model, batch)
    assert adv.linf.max() <= EPS + 1e-6
    assert adv.images.min() >= 0 and adv.images.max() <= 1
    assert adv.images.dtype == batch.images.dtype
    assert np.all(np.isfinite(adv.loss))


@pytest.mark.parametrize("name", sorted(A.PRESETS))
def test_integrated_attacks_respect_budget(name, small_model, batch):
    spec = A.preset(name, eps=EPS, alpha=EPS / 4, steps=3, seed=1, **FAST)
    adv = A.run_attack(spec, small_model, batch)
    assert adv.linf.max() <= EPS + 1e-6


def test_white_box_attack_raises_surrogate_loss(small_model, batch):
    adv = A.run_attack(A.AttackSpec(kind="MI", eps=EPS, alpha=EPS / 10), small_model, batch)
    clean = small_model.loss(batch.images, batch.labels)
    assert adv.loss.mean() > clean.mean()


def test_zero_budget_returns_clean_images(small_model, batch):
    for kind in ("IFGSM", "MI", "DIM", "FIA"):
        x = run(A.AttackSpec(kind=kind, eps=0.0, alpha=0.01, steps=3, **FAST), small_model, batch)
        assert np.array_equal(x, batch.images)


def base(kind="MI", **kw):
    return A.AttackSpec(kind=kind, eps=EPS, alpha=EPS / 5, steps=5, seed=11, **{**FAST, **kw})


@pytest.mark.parametrize("reduced, reference", [
    (base("MI", mu=0.0), base("IFGSM")),
    (base("VMI", beta=0.0), base("MI")),
    (base("DIM", p=0.0), base("MI")),
    (base("SIM", n_scales=1), base("MI")),
    (base("ADMIX", eta=0.0), base("SIM")),
    (base("SSA", rho=0.0, sigma=0.0, n_ssa=1), base("MI")),
    (A.compose("TI", "MI", ti_length=1, **{**FAST, "eps": EPS, "alpha": EPS / 5, "steps": 5,
                                           "seed": 11}), base("MI")),
])
def test_reductions_are_bit_exact(reduced, reference, small_model, batch):
    assert np.array_equal(run(reduced, small_model, batch), run(reference, small_model, batch))


def test_same_seed_same_output_and_seed_matters_for_random_kinds(small_model, batch):
    spec = base("DIM", p=1.0)
    a, b = run(spec, small_model, batch), run(spec, small_model, batch)
    assert np.array_equal(a, b)
    outs = {run(spec.replace(seed=s), small_model, batch).tobytes() for s in range(6)}
    assert len(outs) > 1


def test_callback_sees_every_step(small_model, batch):
    seen = []
    A.run_attack(base("MI"), small_model, batch, callback=lambda t, x: seen.append(t))
    assert seen == [0, 1, 2, 3, 4]


def test_mi_step_is_l1_normalized_with_zero_guard():
    grad = np.array([[[[1.0, -3.0]]], [[[0.0, 0.0]]]])
    prev = np.full_like(grad, 0.5)
    g = A.mi_gradient(prev, grad, 0.9)
    np.testing.assert_allclose(g[0, 0, 0], 0.45 + np.array([0.25, -0.75]))
    np.testing.assert_allclose(g[1, 0, 0], [0.45, 0.45])


def test_nesterov_lookahead():
    x = np.zeros((1, 1, 1, 2))
    g = np.array([[[[1.0, -2.0]]]])
    np.testing.assert_allclose(A.ni_lookahead(x, g, 0.1, 0.5), [[[[0.05, -0.1]]]])


def test_vmi_variance_term_against_direct_average():
    rng_a = np.random.default_rng(0)
    rng_b = np.random.default_rng(0)
    x = np.zeros((1, 1, 2, 2))
    grad = np.ones_like(x)

    def fn(z):
        return 2 * z

    out, v = A.vmi_gradient(x, grad, np.zeros_like(x), fn, 4, 1.5, 0.1, rng_a)
    draws = [rng_b.uniform(-0.15, 0.15, size=x.shape) for _ in range(4)]
    np.testing.assert_allclose(v, np.mean([2 * d for d in draws], axis=0) - grad, atol=1e-12)
    np.testing.assert_array_equal(out, grad)


def test_pgn_with_zero_delta_is_neighbourhood_average():
    rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
    x = np.zeros((1, 1, 2, 2))

    def fn(z):
        return z + 1.0

    got = A.pgn_gradient(x, fn, 3, 0.0, 0.3, 0.1, rng_a)
    draws = [rng_b.uniform(-0.3, 0.3, size=x.shape) for _ in range(3)]
    np.testing.assert_allclose(got, np.mean([d + 1.0 for d in draws], axis=0), atol=1e-12)


def test_pgn_lookahead_moves_against_normalized_gradient():
    rng = np.random.default_rng(0)
    x = np.full((1, 1, 1, 2), 0.5)
    calls = []

    def fn(z):
        calls.append(z.copy())
        return np.array([[[[2.0, -2.0]]]])

    A.pgn_gradient(x, fn, 1, 0.5, 0.0, 0.1, rng)
    np.testing.assert_allclose(calls[1] - calls[0], [[[[-0.1, 0.1]]]])


def test_dim_index_identity_and_padding():
    ident = A.dim_index(4, 4, 1.0, 4, 0, 0)
    assert np.array_equal(ident, np.arange(16).reshape(4, 4))
    shifted = A.dim_index(4, 4, 1.5, 4, 2, 2)  # canvas 6, image in the corner, resized back
    assert (shifted == -1).any()
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    out = T.take(x, shifted).data
    assert set(out[out != 0].tolist()) <= set(x.ravel().tolist())


def test_dim_params_stay_on_canvas():
    rng = np.random.default_rng(0)
    for _ in range(200):
        size, top, left = A.dim_params(rng, 16, 1.15)
        assert 16 <= size <= 18 and 0 <= top <= 18 - size and 0 <= left <= 18 - size


def test_ssa_zero_is_identity_and_noise_free_mask_one_too():
    x = np.random.default_rng(0).random((2, 1, 4, 4))
    assert A.ssa_transform(x, 0.0, 0.0, np.random.default_rng(0)) is x
    y = A.ssa_apply(x, np.zeros_like(x), np.ones_like(x))
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_ti_kernel_is_normalized_triangle():
    k = A.ti_kernel(3)
    np.testing.assert_allclose(k, np.outer([1, 2, 1], [1, 2, 1]) / 16)
    g = np.random.default_rng(0).random((1, 1, 5, 5))
    assert A.ti_smooth(g, 1) is g


def test_sim_gradient_matches_scaled_copies(small_model, batch):
    x, y = batch.images.astype(np.float64), batch.labels
    m64 = small_model.astype(np.float64)
    got = A.sim_gradient(m64, x, y, 3)
    ref = np.mean([A.input_gradient(m64, x / 2 ** i, y) / 2 ** i for i in range(3)], axis=0)
    np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-12)


def test_fia_importance_unit_norm(small_model, batch):
    imp = A.fia_importance(small_model, batch.images, batch.labels, 0.3, 4,
                           np.random.default_rng(0))
    norms = np.sqrt((imp.reshape(len(imp), -1).astype(np.float64) ** 2).sum(1))
    np.testing.assert_allclose(norms, 1.0, rtol=1e-5)


def test_fia_degenerate_features_are_reported(small_model, batch):
    dead = small_model.copy()
    dead.params["dense3.w"] = np.zeros_like(dead.params["dense3.w"])
    with pytest.raises(A.DegenerateFeatureError):
        A.fia_importance(dead, batch.images, batch.labels, 0.0, 1, np.random.default_rng(0))


def test_naa_objective_weights_negative_part():
    attr = T.Tensor(np.array([1.0, -2.0, 3.0]))
    assert float(A.naa_objective(attr, 0.5).data) == pytest.approx(4.0 - 1.0)


def test_compose_builds_integrated_specs():
    ti_dim = A.preset("TI-DIM")
    assert ti_dim.kind == "DIM" and ti_dim.ti_kernel == 5 and ti_dim.rule == "mi"
    sind = A.preset("SI-NI-DIM")
    assert sind.kind == "NI" and sind.transforms == ("dim", "sim")
    assert A.preset("SSA-SI-DIM").transforms == ("dim", "ssa", "sim")
    assert A.preset("PGN-DIM").rule == "pgn"
    with pytest.raises(ValueError):
        A.compose("MI", "NI")
    with pytest.raises(ValueError):
        A.AttackSpec(kind="FIA", chain=("dim",))


def test_spec_validation_and_round_trip():
    spec = A.preset("SSA-SI-DIM", seed=4)
    assert A.AttackSpec.from_dict(spec.to_dict()) == spec
    for bad in (dict(kind="XYZ"), dict(eps=-0.1), dict(steps=0), dict(p=1.5),
                dict(ti_kernel=4), dict(n_vmi=0), dict(chain=("blur",))):
        with pytest.raises(ValueError):
            A.AttackSpec(**bad)


def test_run_attack_input_checks(small_model, batch):
    with pytest.raises(T.ShapeError):
        A.run_attack(base(), small_model, ImageBatch(np.zeros((1, 1, 4, 4), np.float32), [0]))
    with pytest.raises(ValueError):
        A.run_attack(base(), small_model, ImageBatch(batch.images + 2, batch.labels))
    with pytest.raises(TypeError):
        A.run_attack({"kind": "MI"}, small_model, batch)


def test_advbatch_norms():
    x = np.zeros((2, 1, 2, 2), np.float32)
    adv = A.AdvBatch(x + np.array([0.1, 0.2], np.float32).reshape(2, 1, 1, 1), x, np.array([0, 1]))
    np.testing.assert_allclose(adv.linf, [0.1, 0.2], rtol=1e-6)
    np.testing.assert_allclose(adv.l2, [0.2, 0.4], rtol=1e-6)


KIND_OR_PRESET = list(A.KINDS) + sorted(A.PRESETS)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(KIND_OR_PRESET), st.floats(0.0, 0.3), st.floats(0.005, 0.2),
       st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_budget_fuzz(name, eps, alpha, steps, seed):
    from soupforge import data as D
    from soupforge import models as M

    batch = D.synth_dataset(D.SynthSpec(classes=3, size=8, per_class=2), 0).to_batch()
    model = M.build_model(M.conv_arch("f", (1, 8, 8), 3, depth=1, width=2, hidden=4), 0)
    params = dict(eps=eps, alpha=alpha, steps=steps, seed=seed, **FAST)
    spec = A.preset(name, **params) if name in A.PRESETS else A.AttackSpec(kind=name, **params)
    try:
        adv = A.run_attack(spec, model, batch)
    except A.DegenerateFeatureError:
        return
    assert adv.linf.max() <= eps + 1e-6
    assert adv.images.min() >= 0 and adv.images.max() <= 1
