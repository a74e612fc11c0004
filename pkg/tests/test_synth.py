"""Synthetic dual-pixel generator: PSF geometry, view physics, dataset IO."""

import numpy as np
import pytest

from dpalign.synth import (
    DEPTH_RANGE,
    Layer,
    LensModel,
    Scene,
    dataset_ids,
    generate_scene,
    half_disc_psf,
    make_samples,
    read_dataset,
    read_png,
    render_dp_pair,
    write_dataset,
    write_png,
)

import oracles


def flat_scene(h, w, depths, colors):
    """Stacked full-frame layers; the last one wins everywhere it is masked."""
    layers = [
        Layer(np.ones((h, w)), d, np.full((3, h, w), c, dtype=np.float64))
        for d, c in zip(depths, colors)
    ]
    sharp = layers[-1].texture.copy()
    depth = np.full((h, w), depths[-1])
    return Scene(sharp, depth, layers)


def test_radius_law_and_clipping():
    lens = LensModel(focal_depth=4.0, blur_gain=2.0, max_radius=4.0)
    assert lens.radius(4.0) == 0.0
    assert lens.radius(5.0) == 2.0
    assert lens.radius(3.0) == -2.0
    assert lens.radius(8.0) == 4.0   # 8 clipped to max_radius
    assert lens.radius(1.0) == -4.0


def test_psf_unit_sum_and_support():
    for r in (0.7, 1.0, 2.3, 3.0, 4.0, 5.5):
        for side in ("left", "right", "full"):
            psf = half_disc_psf(r, side)
            assert abs(psf.sum() - 1.0) < 1e-12, (r, side)
            assert psf.shape == (2 * int(np.ceil(r)) + 1,) * 2
            half = psf.shape[1] // 2
            if side == "left":
                assert np.all(psf[:, half + 1 :] == 0)
                assert psf[:, :half].sum() > 0
            elif side == "right":
                assert np.all(psf[:, :half] == 0)
    with pytest.raises(ValueError, match="left/right/full"):
        half_disc_psf(2.0, "top")


def test_small_radius_degenerates_to_identity():
    for r in (0.0, 0.2, 0.49, -0.3):
        psf = half_disc_psf(r, "left")
        assert psf.shape == (1, 1) and psf[0, 0] == 1.0


def test_half_disc_centroid():
    # half-disc centroid sits at 4r/(3*pi) from the optical axis, so the two
    # view PSFs are 8r/(3*pi) apart; the 8x8 coverage subgrid stays within 2%
    for r in (2.0, 3.0, 5.0):
        want = 4.0 * r / (3.0 * np.pi)
        cl = oracles.psf_centroid_x(half_disc_psf(r, "left"))
        cr = oracles.psf_centroid_x(half_disc_psf(r, "right"))
        assert abs(cl + want) < 0.02 * want
        assert abs(cr - want) < 0.02 * want
        assert abs(oracles.psf_centroid_x(half_disc_psf(r, "full"))) < 1e-12


def test_zero_gain_views_equal_sharp_exactly():
    scene = generate_scene(0, 32, 32, region_count=4)
    left, right, radii = render_dp_pair(scene, LensModel(blur_gain=0.0))
    assert np.array_equal(left, scene.sharp)
    assert np.array_equal(right, scene.sharp)
    assert np.all(radii == 0)


def test_constant_scene_stays_constant():
    # layer masks are blurred with the same PSF as the colors, so a scene
    # that is one flat color at mixed depths renders to that color
    scene = flat_scene(24, 24, depths=[7.0, 2.0, 5.0], colors=[0.6, 0.6, 0.6])
    left, right, _ = render_dp_pair(scene, LensModel())
    assert np.max(np.abs(left - 0.6)) < 1e-6
    assert np.max(np.abs(right - 0.6)) < 1e-6


def test_views_shift_apart_and_sign_flips():
    # a textured uniform-depth plane: the views are the same image shifted
    # horizontally by about 8r/(3*pi), with direction set by sign(r)
    rng = np.random.default_rng(3)
    h = w = 48
    tex = rng.uniform(0.1, 0.9, (3, h, w))
    tex = tex + np.roll(tex, 1, axis=2) + np.roll(tex, 1, axis=1)  # mild smoothing
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    shifts = {}
    for depth in (7.0, 1.0):  # r = +3 and -3
        scene = Scene(tex.copy(), np.full((h, w), depth),
                      [Layer(np.ones((h, w)), depth, tex.copy())])
        lens = LensModel(focal_depth=4.0, blur_gain=1.0, max_radius=4.0)
        left, right, radii = render_dp_pair(scene, lens)
        assert np.all(radii == lens.radius(depth))
        shifts[depth] = oracles.best_shift(left, right, max_shift=6)
    assert 2 <= abs(shifts[7.0]) <= 4       # measured ~8*3/(3*pi) = 2.55 px
    assert 2 <= abs(shifts[1.0]) <= 4
    assert np.sign(shifts[7.0]) == -np.sign(shifts[1.0]) != 0


def test_in_focus_regions_untouched_away_from_boundaries():
    # background at the focal plane, one defocused rectangle: in-focus pixels
    # farther than the PSF half-width from the rectangle stay within 2/255
    h = w = 40
    rng = np.random.default_rng(4)
    bg = rng.uniform(0.1, 0.9, (3, h, w))
    fg = rng.uniform(0.1, 0.9, (3, h, w))
    mask = np.zeros((h, w))
    mask[12:26, 14:30] = 1.0
    layers = [Layer(np.ones((h, w)), 4.0, bg), Layer(mask, 7.0, fg)]
    sharp = fg * mask + (1 - mask) * bg
    scene = Scene(sharp, 4.0 * (1 - mask) + 7.0 * mask, layers)
    left, right, radii = render_dp_pair(scene, LensModel())
    margin = 5  # ceil(r) + 1
    far = np.ones((h, w), dtype=bool)
    far[12 - margin : 26 + margin, 14 - margin : 30 + margin] = False
    assert np.all(radii[far] == 0)
    for view in (left, right):
        assert np.max(np.abs(view - sharp)[:, far]) < 2.0 / 255.0


def test_make_samples_deterministic_and_per_sample_seeded():
    a = make_samples(5, 2, 24, 24, 3)
    b = make_samples(5, 2, 24, 24, 3)
    c = make_samples(6, 1, 24, 24, 3)
    for x, y in zip(a, b):
        assert np.array_equal(x.left, y.left)
        assert np.array_equal(x.right, y.right)
        assert np.array_equal(x.sharp, y.sharp)
    assert np.array_equal(a[1].sharp, c[0].sharp)  # sample i uses seed + i


def test_rendered_samples_in_unit_range():
    for s in make_samples(0, 4, 24, 24, 4, LensModel(4.0, 2.0, 5.0)):
        for img in (s.left, s.right, s.sharp):
            assert img.shape == (3, 24, 24)
            assert img.min() >= 0.0 and img.max() <= 1.0


def test_scene_depths_within_range():
    scene = generate_scene(11, 32, 32, region_count=6)
    lo, hi = DEPTH_RANGE
    assert lo <= scene.depth.min() <= scene.depth.max() <= hi
    assert len(scene.layers) == 6
    with pytest.raises(ValueError, match="region_count"):
        generate_scene(0, 8, 8, region_count=0)


def test_psf_too_large_for_image():
    scene = generate_scene(0, 12, 12, region_count=2)
    with pytest.raises(ValueError, match="PSF larger"):
        render_dp_pair(scene, LensModel(max_radius=6.0))


def test_png_round_trip_quantizes_to_half_step(tmp_path):
    rng = np.random.default_rng(8)
    img = rng.uniform(0, 1, (3, 16, 16))
    p = tmp_path / "x.png"
    write_png(p, img)
    back = read_png(p)
    assert back.dtype == np.float32
    assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-7


def test_dataset_write_read_and_errors(tmp_path):
    samples = make_samples(0, 3, 16, 16, 3)
    write_dataset(samples, tmp_path, manifest={"count": 3})
    assert sorted(p.name for p in tmp_path.glob("*.png")) == sorted(
        f"{i:04d}_{part}.png" for i in range(3) for part in "LRS"
    )
    assert (tmp_path / "manifest.json").exists()
    assert dataset_ids(tmp_path) == ["0000", "0001", "0002"]
    loaded = read_dataset(tmp_path)
    assert [sid for sid, _ in loaded] == ["0000", "0001", "0002"]
    for (_, got), src in zip(loaded, samples):
        assert np.max(np.abs(got.left - src.left)) <= 0.5 / 255.0 + 1e-7

    (tmp_path / "0001_S.png").unlink()
    with pytest.raises(FileNotFoundError, match="missing 0001_S.png"):
        read_dataset(tmp_path)
    assert dataset_ids(tmp_path, require_sharp=False) == ["0000", "0001", "0002"]
    with pytest.raises(FileNotFoundError, match="no \\*_L.png"):
        dataset_ids(tmp_path / "empty")


def test_write_dataset_bytes_deterministic(tmp_path):
    samples = make_samples(1, 2, 16, 16, 3)
    write_dataset(samples, tmp_path / "a", manifest={"seed": 1})
    write_dataset(samples, tmp_path / "b", manifest={"seed": 1})
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes(), p.name
