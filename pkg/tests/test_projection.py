import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import render_luma_naive
from ipcd.pcio import PointCloud, normalize_cloud
from ipcd.projection import (LUMA, HemisphereGrid, PLDMap, SplatImage, compute_pld, load_pld_csv, pld_luma,
                             pld_value, render_ortho, rotation_for, save_luma_png, save_pld_csv, view_direction)
from ipcd.scenegen import SceneSpec, build_scene, sample_triplet, sun_from_time


def test_default_grid():
    g = HemisphereGrid.regular()
    assert g.K == 324 and g.shape == (9, 36)
    assert g.thetas[0] == 0 and g.thetas[-1] == 80 and g.phis[-1] == 350
    assert g.band_areas().sum() == pytest.approx(1.0)
    assert np.all(g.band_areas() > 0)


def test_grid_validation():
    with pytest.raises(ValueError):
        HemisphereGrid(np.array([0.0, 0.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        HemisphereGrid(np.array([0.0]), np.array([0.0, 360.0]))


def test_rotation_examples():
    np.testing.assert_array_equal(rotation_for(0, 0), np.eye(3))
    np.testing.assert_allclose(rotation_for(0, 90) @ [1, 0, 0], [0, 1, 0], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-360, 360), st.floats(-360, 360))
def test_rotation_orthonormal(theta, phi):
    R = rotation_for(theta, phi)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_view_direction_follows_compass():
    np.testing.assert_allclose(view_direction(90, 90), [1, 0, 0], atol=1e-12)   # camera due east
    np.testing.assert_allclose(view_direction(90, 180), [0, -1, 0], atol=1e-12)  # due south
    np.testing.assert_allclose(view_direction(0, 123), [0, 0, 1], atol=1e-12)


def test_single_point_disc():
    size, eps = 256, 0.02
    img = render_ortho(PointCloud(np.zeros((1, 3)), np.ones((1, 3))), np.eye(3), size, eps)
    r = eps * 0.5 * size
    yy, xx = np.mgrid[0:size, 0:size]
    expected = (xx + 0.5 - size / 2) ** 2 + (yy + 0.5 - size / 2) ** 2 <= r * r
    expected[size // 2, size // 2] = True  # the containing pixel
    np.testing.assert_array_equal(img.covered, expected)
    assert np.all(img.depth[img.covered] == 0.0)
    assert np.all(np.isinf(img.depth[~img.covered]))
    assert np.all(img.pixels[~img.covered] == 0)


def test_tiny_splat_still_covers_containing_pixel():
    img = render_ortho(PointCloud(np.array([[0.1, 0.1, 0.0]]), np.ones((1, 3))), np.eye(3), 64, 1e-6)
    assert img.covered.sum() == 1


def test_zbuffer_order():
    pos = np.array([[0.0, 0.0, 0.5], [0.0, 0.0, -0.5]])
    cols = np.array([[1.0, 0, 0], [0, 0, 1.0]])
    for order in ([0, 1], [1, 0]):
        img = render_ortho(PointCloud(pos[order], cols[order]), np.eye(3), 64)
        np.testing.assert_array_equal(img.pixels[32, 32], [1.0, 0, 0])


def test_image_size_error():
    with pytest.raises(ValueError):
        render_ortho(PointCloud(np.zeros((1, 3)), np.zeros((1, 3))), np.eye(3), 4)


def test_no_coverage_outside_unit_disc(rng):
    c, _ = normalize_cloud(PointCloud(rng.normal(size=(3000, 3)), rng.random((3000, 3))))
    size, eps = 64, 0.02
    half_px = 2.0 / size * np.sqrt(0.5)
    yy, xx = np.mgrid[0:size, 0:size]
    cx = (xx + 0.5) / size * 2 - 1
    cy = 1 - (yy + 0.5) / size * 2
    outside = np.hypot(cx, cy) > 1 + eps + half_px
    for th, ph in ((0, 0), (40, 130), (80, 300)):
        img = render_ortho(c, rotation_for(th, ph), size, eps)
        assert not img.covered[outside].any()


def test_render_matches_naive_oracle(rng):
    scene = build_scene(SceneSpec(seed=4, building_count=(1, 2)))
    t = sample_triplet(scene, sun_from_time("morning"), 1500, seed=2)
    c, _ = normalize_cloud(t.cloud)
    for th, ph in ((0, 0), (30, 90), (70, 200), (80, 350)):
        R = rotation_for(th, ph)
        img = render_ortho(c, R, 64, 0.02)
        want = render_luma_naive(c.positions, c.colors, R, 64, 0.02)
        got, _ = pld_value(img)
        assert got @ LUMA == pytest.approx(want, abs=1e-12)


def test_pld_value_examples():
    cov = np.ones((8, 8), bool)
    img = SplatImage(np.full((8, 8, 3), 0.5), np.zeros((8, 8)), cov)
    m, c = pld_value(img)
    np.testing.assert_allclose(m, [0.5] * 3)
    assert c == 1.0
    empty = SplatImage(np.zeros((8, 8, 3)), np.full((8, 8), np.inf), np.zeros((8, 8), bool))
    m, c = pld_value(empty)
    np.testing.assert_array_equal(m, [0, 0, 0])
    assert c == 0.0
    px = np.full((8, 8, 3), 0.2)
    px[:4] = 0.8
    np.testing.assert_allclose(pld_value(SplatImage(px, np.zeros((8, 8)), cov))[0], [0.5] * 3)


def test_uniform_sphere_is_flat(rng):
    d = rng.normal(size=(4000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pld = compute_pld(PointCloud(d, np.full((4000, 3), 0.6)), HemisphereGrid.regular(20, 45))
    assert np.ptp(pld.values) <= 0.02


def test_pld_permutation_and_translation_invariance(rng):
    scene = build_scene(SceneSpec(seed=1, building_count=(1, 1)))
    t = sample_triplet(scene, sun_from_time("noon"), 2000, seed=0)
    grid = HemisphereGrid.regular(20, 30)
    base = compute_pld(t.cloud, grid)
    perm = rng.permutation(len(t))
    shuffled = compute_pld(t.cloud.take(perm), grid)
    np.testing.assert_allclose(shuffled.values, base.values, atol=1e-12, rtol=0)
    np.testing.assert_allclose(shuffled.coverage, base.coverage, atol=1e-12, rtol=0)
    moved = compute_pld(PointCloud(t.cloud.positions + [5.0, -3.0, 2.0], t.cloud.colors), grid)
    np.testing.assert_allclose(moved.values, base.values, atol=1e-9)


def test_coverage_positive():
    scene = build_scene(SceneSpec(seed=2, building_count=(1, 1)))
    t = sample_triplet(scene, sun_from_time("noon"), 3000, seed=0)
    pld = compute_pld(t.cloud, HemisphereGrid.regular(20, 40))
    assert np.all((pld.coverage > 0) & (pld.coverage <= 1))
    assert np.all((pld.values >= 0) & (pld.values <= 1))


@pytest.mark.parametrize("seed,time", [(0, "morning"), (1, "evening"), (2, "noon")])
def test_sun_half_space_brighter(seed, time):
    scene = build_scene(SceneSpec(seed=seed, building_count=(1, 1)))
    sun = sun_from_time(time)
    t = sample_triplet(scene, sun, 5000, seed=seed)
    pld = compute_pld(t.cloud, HemisphereGrid.regular(10, 20))
    luma = pld_luma(pld)
    phis = np.radians(pld.grid.phis)
    facing = np.cos(phis - np.radians(sun.azimuth)) > 0
    rows = pld.grid.thetas > 0
    assert luma[rows][:, facing].mean() > luma[rows][:, ~facing].mean()


def test_luma_examples():
    g = HemisphereGrid(np.array([0.0]), np.array([0.0, 90.0]))
    pld = PLDMap(g, np.array([[[1.0, 1.0, 1.0], [1.0, 0.0, 0.0]]]), np.ones((1, 2)))
    np.testing.assert_allclose(pld_luma(pld), [[1.0, 0.2126]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 1))
def test_luma_monotone(rgb, ch, bump):
    g = HemisphereGrid(np.array([0.0]), np.array([0.0]))
    a = np.array(rgb)
    b = a.copy()
    b[ch] = min(1.0, b[ch] + bump)
    la = pld_luma(PLDMap(g, a[None, None], np.ones((1, 1))))
    lb = pld_luma(PLDMap(g, b[None, None], np.ones((1, 1))))
    assert lb[0, 0] >= la[0, 0]


def test_csv_and_png_roundtrip(tmp_path, rng):
    g = HemisphereGrid.regular(20, 60)
    pld = PLDMap(g, rng.random((*g.shape, 3)), rng.random(g.shape))
    save_pld_csv(pld, tmp_path / "p.csv")
    back = load_pld_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.values, pld.values)
    np.testing.assert_array_equal(back.coverage, pld.coverage)
    np.testing.assert_array_equal(back.grid.thetas, g.thetas)
    save_luma_png(pld, tmp_path / "p.png")
    assert (tmp_path / "p.png").stat().st_size > 0
