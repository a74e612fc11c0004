"""PSNR/SSIM/MAE behavior, exact unit values, and oracle equivalence."""

import numpy as np
import pytest

from dpalign.metrics import PSNR_CAP, mae, psnr, ssim

import oracles


def test_psnr_exact_values():
    # both constructions hit MSE 0.01 on the nose, so psnr is exactly 20 dB
    z = np.zeros((1, 64, 64))
    spike = z.copy()
    spike[0, 0, 0] = 6.4  # 6.4^2 / 4096 == 0.01
    assert psnr(z, spike) == 20.0
    assert psnr(np.zeros((1, 8, 8)), np.full((1, 8, 8), 0.1)) == 20.0


def test_psnr_cap_for_identical():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (3, 12, 12))
    assert psnr(img, img) == PSNR_CAP == 100.0
    # microscopic error also caps rather than exceeding 100
    assert psnr(img, img + 1e-11) == 100.0


def test_psnr_symmetry_and_known_value():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (3, 10, 10))
    b = rng.uniform(0, 1, (3, 10, 10))
    assert psnr(a, b) == psnr(b, a)
    flat = np.full((3, 8, 8), 0.5)
    got = psnr(np.zeros((3, 8, 8)), flat)  # MSE 0.25
    assert abs(got - (-10.0 * np.log10(0.25))) < 1e-12


def test_psnr_orders_by_error():
    rng = np.random.default_rng(2)
    img = rng.uniform(0.2, 0.8, (3, 12, 12))
    noise = rng.normal(0, 1, img.shape)
    assert psnr(img, img + 0.01 * noise) > psnr(img, img + 0.1 * noise)


def test_pair_validation():
    with pytest.raises(ValueError, match="shape mismatch"):
        psnr(np.zeros((3, 8, 8)), np.zeros((3, 8, 9)))
    with pytest.raises(ValueError, match=r"\(c, h, w\)"):
        mae(np.zeros((8, 8)), np.zeros((8, 8)))


def test_mae_values_and_symmetry():
    a = np.zeros((3, 6, 6))
    b = np.full((3, 6, 6), 0.5)
    assert mae(a, b) == 0.5
    assert mae(a, a) == 0.0
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, (3, 7, 7))
    y = rng.uniform(0, 1, (3, 7, 7))
    assert mae(x, y) == mae(y, x)
    assert abs(mae(x, y) - np.mean(np.abs(x - y))) < 1e-15


def test_ssim_identical_is_exactly_one():
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, (3, 16, 16))
    assert ssim(img, img) == 1.0


def test_ssim_matches_window_loop_oracle():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 4))
        h = int(rng.integers(11, 18))
        w = int(rng.integers(11, 18))
        a = rng.uniform(0, 1, (c, h, w))
        b = np.clip(a + rng.normal(0, rng.uniform(0.02, 0.3), a.shape), 0, 1)
        assert abs(ssim(a, b) - oracles.ssim_loops(a, b)) < 1e-6


def test_ssim_constant_patch_closed_form():
    for u, v in ((0.2, 0.7), (0.5, 0.5), (0.1, 0.9)):
        a = np.full((1, 12, 12), u)
        b = np.full((1, 12, 12), v)
        assert abs(ssim(a, b) - oracles.constant_patch_ssim(u, v)) < 1e-12


def test_ssim_symmetry_and_ordering():
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 1, (3, 14, 14))
    b = rng.uniform(0, 1, (3, 14, 14))
    assert ssim(a, b) == ssim(b, a)
    noise = rng.normal(0, 1, a.shape)
    assert ssim(a, np.clip(a + 0.02 * noise, 0, 1)) > ssim(a, np.clip(a + 0.2 * noise, 0, 1))


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="at least 11px"):
        ssim(np.zeros((1, 10, 12)), np.zeros((1, 10, 12)))
