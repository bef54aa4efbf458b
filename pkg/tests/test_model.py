import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import loss_probe, random_triplet
from oracles import knn_brute
from ipcd import autodiff as ad
from ipcd.model import (ConfigError, LossConfig, MissingPLDError, ModelConfig, Prediction, TrainConfig, TrainSample,
                        encode, forward_base, forward_full, infer, init_params, knn_indices, load_params, loss_total,
                        pld_encode, save_params, train, write_history_csv)
from ipcd.pcio import IntrinsicTriplet, PointCloud
from ipcd.projection import HemisphereGrid, PLDMap, compute_pld
from ipcd.scenegen import sun_from_time

SMALL = dict(width=16, head_width=8, pld_width=4, k=6)


def flat_pld(grid=None, value=0.5):
    grid = grid or HemisphereGrid.regular()
    return PLDMap(grid, np.full((*grid.shape, 3), value), np.ones(grid.shape))


def rotation_z(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


# ------------------------------------------------------------------ knn

def test_knn_matches_brute(rng):
    pos = rng.normal(size=(500, 3))
    np.testing.assert_array_equal(knn_indices(pos, 8), knn_brute(pos, 8))


def test_knn_collinear_ties():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    np.testing.assert_array_equal(knn_indices(pos, 2), [[1, 2], [0, 2], [1, 3], [2, 1]])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10_000))
def test_knn_ties_property(n, seed):
    rng = np.random.default_rng(seed)
    pos = rng.integers(0, 3, size=(n, 3)).astype(float)  # lattice: many exact ties
    k = int(rng.integers(1, n))
    np.testing.assert_array_equal(knn_indices(pos, k), knn_brute(pos, k))


def test_knn_rigid_invariance(rng):
    pos = rng.normal(size=(300, 3))
    R = rotation_z(37.0)
    np.testing.assert_array_equal(knn_indices(pos @ R.T + [1, 2, 3], 10), knn_indices(pos, 10))


def test_knn_errors():
    with pytest.raises(ConfigError):
        knn_indices(np.zeros((3, 3)), 3)
    assert knn_indices(np.zeros((1, 3)), 0).shape == (1, 0)


# ------------------------------------------------------------------ encoders

def test_encode_single_point_and_zero_weights():
    p = init_params(ModelConfig(**SMALL), 0)
    cloud = PointCloud(np.zeros((1, 3)), np.full((1, 3), 0.5))
    h = encode(cloud, np.zeros((1, 0), np.int64), p)
    assert h.shape == (1, 16) and np.all(np.isfinite(h))
    zero = p.copy()
    zero.arrays = {k: np.zeros_like(v) for k, v in p.arrays.items()}
    np.testing.assert_array_equal(encode(cloud, np.zeros((1, 0), np.int64), zero), 0.0)


def test_encode_knn_mismatch():
    p = init_params(ModelConfig(**SMALL), 0)
    with pytest.raises(ad.ShapeError):
        encode(PointCloud(np.zeros((3, 3)), np.zeros((3, 3))), np.zeros((2, 1), np.int64), p)


def test_pld_encode_azimuth_roll_invariance(rng):
    p = init_params(ModelConfig(**SMALL), 1)
    grid = HemisphereGrid.regular()
    vals = rng.random((*grid.shape, 3))
    cov = rng.random(grid.shape)
    a = pld_encode(PLDMap(grid, vals, cov), p)
    b = pld_encode(PLDMap(grid, np.roll(vals, 7, axis=1), np.roll(cov, 7, axis=1)), p)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert a.shape == (3,)


def test_pld_encode_zero_weights():
    p = init_params(ModelConfig(**SMALL), 1)
    zero = {k: np.zeros_like(v) for k, v in p.arrays.items()}
    np.testing.assert_array_equal(pld_encode(flat_pld(), type(p)(p.config, zero)), 0.0)


def test_pld_grid_shape_mismatch():
    p = init_params(ModelConfig(**SMALL), 0)
    with pytest.raises(ad.ShapeError, match="grid shape"):
        pld_encode(flat_pld(HemisphereGrid.regular(20, 30)), p)


# ------------------------------------------------------------------ forward

def test_forward_full_shapes_and_range(rng):
    t = random_triplet(rng, 64)
    p = init_params(ModelConfig(**SMALL), 0)
    pred = forward_full(t.cloud, flat_pld(), p)
    for x in (pred.albedo, pred.shade, pred.pre_albedo, pred.pre_shade):
        assert x.shape == (64, 3)
        assert np.all((x > 0) & (x < 1))


def test_forward_permutation_equivariance(rng):
    t = random_triplet(rng, 80)
    perm = rng.permutation(80)
    for p in (init_params(ModelConfig(**SMALL, variant="base"), 0), init_params(ModelConfig(**SMALL), 0)):
        pld = flat_pld() if p.config.needs_pld else None
        run = forward_full if p.config.variant == "full" else (lambda c, _pld, q: forward_base(c, q))
        a = run(t.cloud, pld, p)
        b = run(t.cloud.take(perm), pld, p)
        np.testing.assert_allclose(b.albedo, a.albedo[perm], atol=1e-12)
        np.testing.assert_allclose(b.shade, a.shade[perm], atol=1e-12)


def test_forward_depends_on_pld(rng):
    t = random_triplet(rng, 40)
    p = init_params(ModelConfig(**SMALL), 2)
    a = forward_full(t.cloud, flat_pld(value=0.2), p)
    b = forward_full(t.cloud, flat_pld(value=0.9), p)
    assert np.abs(a.albedo - b.albedo).max() > 1e-6
    np.testing.assert_array_equal(a.pre_albedo, b.pre_albedo)


def test_forward_variant_checks(rng):
    t = random_triplet(rng, 20)
    with pytest.raises(ConfigError):
        forward_full(t.cloud, flat_pld(), init_params(ModelConfig(**SMALL, variant="base")))
    with pytest.raises(ConfigError):
        forward_base(t.cloud, init_params(ModelConfig(**SMALL)))
    with pytest.raises(MissingPLDError):
        forward_full(t.cloud, None, init_params(ModelConfig(**SMALL)))
    with pytest.raises(ConfigError):
        ModelConfig(variant="huge")


def test_base_stacks_are_independent(rng):
    t = random_triplet(rng, 30)
    p = init_params(ModelConfig(**SMALL, variant="base"), 0)
    q = p.copy()
    for k in q.arrays:
        if k.startswith("albedo_"):
            q.arrays[k] = q.arrays[k] + rng.normal(size=q.arrays[k].shape)
    a, b = forward_base(t.cloud, p), forward_base(t.cloud, q)
    np.testing.assert_array_equal(a.shade, b.shade)
    assert np.abs(a.albedo - b.albedo).max() > 1e-6


@pytest.mark.parametrize("flags,expect", [
    (dict(use_pld=False), "pld.l0.W"),
    (dict(use_hfr=False), "pre_albedo.h.W"),
    (dict(share_encoder=False), "enc.in0.W"),
])
def test_ablation_params_absent(flags, expect):
    assert expect not in init_params(ModelConfig(**SMALL, **flags)).arrays
    assert expect in init_params(ModelConfig(**SMALL)).arrays


# ------------------------------------------------------------------ losses

def test_loss_examples():
    a = np.full((4, 3), 0.5)
    s = np.full((4, 3), 0.8)
    t = IntrinsicTriplet(PointCloud(np.zeros((4, 3)), a * s), a, s, sun_from_time("noon"))
    total, terms = loss_total(Prediction(a, s), t)
    assert float(total.value) == 0.0 and set(terms) == {"alb", "shd", "phy"}
    _, terms = loss_total(Prediction(a + 0.1, s), t)
    assert terms["alb"] == pytest.approx(np.sqrt(12 * 0.01))
    assert terms["shd"] == 0.0
    assert terms["phy"] == pytest.approx(np.sqrt(12 * 0.08 ** 2))


def test_loss_lambda_scales_pre_terms(rng):
    t = random_triplet(rng, 10)
    pred = Prediction(t.albedo, t.shade, t.albedo * 0.5, t.shade)
    total0, _ = loss_total(pred, t, LossConfig(0.0))
    total1, terms = loss_total(pred, t, LossConfig(0.3))
    assert float(total0.value) == pytest.approx(0.0, abs=1e-12)
    assert float(total1.value) == pytest.approx(0.3 * (terms["alb_pre"] + terms["phy_pre"]))
    with pytest.raises(ConfigError):
        LossConfig(-1.0)


@pytest.mark.parametrize("flags", [dict(), dict(variant="base"), dict(use_pld=False), dict(share_encoder=False)])
def test_loss_gradient(rng, flags):
    t = random_triplet(rng, 32)
    p = init_params(ModelConfig(**SMALL, **flags), 3)
    pld = compute_pld(t.cloud, HemisphereGrid.regular())
    fn, x, g = loss_probe(p, t, pld)
    rep = ad.grad_check_report(fn, x, g)
    assert rep.max_rel_error < 1e-4
    assert rep.checked > 0.9 * x.size


# ------------------------------------------------------------------ training

@pytest.fixture(scope="module")
def tiny_samples():
    rng = np.random.default_rng(5)
    out = []
    for i in range(2):
        t = random_triplet(rng, 200)
        out.append(TrainSample.prepare(t, flat_pld(value=0.3 + 0.3 * i), f"s{i}"))
    return out


def cfg(**kw):
    base = dict(iterations=30, points=64, k=6, lr=3e-3, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def test_train_reduces_loss(tiny_samples):
    res = train(tiny_samples, cfg(iterations=150))
    first = np.mean([h["total"] for h in res.history[:20]])
    last = np.mean([h["total"] for h in res.history[-20:]])
    assert last < first
    assert len(res.history) == 150


def test_train_deterministic(tiny_samples, tmp_path):
    a = train(tiny_samples, cfg())
    b = train(tiny_samples, cfg())
    save_params(a.params, tmp_path / "a.npz")
    save_params(b.params, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    write_history_csv(a.history, tmp_path / "a.csv")
    write_history_csv(b.history, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_train_fresh_batches(tiny_samples):
    res = train(tiny_samples, cfg(batch_pool=0, iterations=10))
    assert len(res.history) == 10


def test_step_by_step_phases(tiny_samples):
    res = train(tiny_samples, cfg(variant="base", iterations=40))
    assert [h["phase"] for h in res.history] == ["shade"] * 20 + ["albedo"] * 20
    assert set(res.history[0]) & {"alb", "phy"} == set()
    assert {"alb", "shd", "phy"} <= set(res.history[-1])


def test_step_by_step_shade_stack_frozen_in_albedo_phase(tiny_samples, monkeypatch):
    import ipcd.model as m

    snaps = []
    real = m.ad.adam_step

    def spy(params, grads, state):
        snaps.append((set(grads), {k: v.copy() for k, v in params.items()}))
        return real(params, grads, state)

    monkeypatch.setattr(m.ad, "adam_step", spy)
    train(tiny_samples, cfg(variant="base", iterations=10))
    for it, (names, _) in enumerate(snaps):
        prefix = "shade_" if it < 5 else "albedo_"
        assert names and all(n.startswith(prefix) for n in names)
    after = snaps[5][1]
    for _, arrays in snaps[5:]:
        for k in arrays:
            if k.startswith("shade_"):
                np.testing.assert_array_equal(arrays[k], after[k])


def test_train_config_validation(tiny_samples):
    with pytest.raises(ConfigError):
        TrainConfig(variant="full", mode="step-by-step")
    with pytest.raises(ConfigError):
        TrainConfig(iterations=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_pool=-1)
    with pytest.raises(MissingPLDError):
        train([TrainSample(tiny_samples[0].triplet, None)], cfg())
    with pytest.raises(ValueError):
        train([], cfg())


# ------------------------------------------------------------------ inference and params

def test_infer_order_independent(rng):
    t = random_triplet(rng, 300)
    p = init_params(ModelConfig(**SMALL, chunk=100), 0)
    pld = flat_pld()
    a = infer(t.cloud, pld, p)
    perm = rng.permutation(300)
    b = infer(t.cloud.take(perm), pld, p)
    np.testing.assert_array_equal(b.albedo, a.albedo[perm])
    np.testing.assert_array_equal(b.shade, a.shade[perm])
    assert a.pre_albedo is not None


def test_infer_needs_pld(rng):
    t = random_triplet(rng, 50)
    with pytest.raises(MissingPLDError, match="pld"):
        infer(t.cloud, None, init_params(ModelConfig(**SMALL)))
    base = init_params(ModelConfig(**SMALL, variant="base"))
    a = infer(t.cloud, None, base)
    b = infer(t.cloud, flat_pld(), base)
    np.testing.assert_array_equal(a.albedo, b.albedo)
    assert a.pre_albedo is None
    no_pld = init_params(ModelConfig(**SMALL, use_pld=False))
    assert infer(t.cloud, None, no_pld).albedo.shape == (50, 3)


def test_params_roundtrip(tmp_path):
    p = init_params(ModelConfig(**SMALL, share_encoder=False), 9)
    save_params(p, tmp_path / "p.npz")
    q = load_params(tmp_path / "p.npz")
    assert q.config == p.config
    assert q.arrays.keys() == p.arrays.keys()
    for k in p.arrays:
        np.testing.assert_array_equal(q.arrays[k], p.arrays[k])


def test_params_bad_format(tmp_path):
    np.savez(tmp_path / "bad.npz", __manifest__=np.array('{"format": "other"}'))
    with pytest.raises(ConfigError):
        load_params(tmp_path / "bad.npz")
