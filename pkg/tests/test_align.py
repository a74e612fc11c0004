"""Alignment primitives: cost volume, offset heads, deformable convolution."""

import numpy as np
import pytest

from dpalign.align import (
    DeformKernel,
    cost_volume,
    deform_conv2d,
    offset_head,
    split_offset_field,
)
from dpalign.tensor import ConvParams, Tensor, conv2d

import oracles


def test_cost_volume_matches_loop_oracle():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
        d = int(rng.integers(1, 4))
        h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
        left = rng.uniform(-1, 1, (n, c, h, w))
        right = rng.uniform(-1, 1, (n, c, h, w))
        got = cost_volume(Tensor(left), Tensor(right), d).values
        want = oracles.cost_volume_loops(left, right, d)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-6)


def test_cost_volume_out_of_bounds_is_zero():
    rng = np.random.default_rng(0)
    left = Tensor(rng.uniform(0.5, 1.0, (1, 2, 4, 4)))
    right = Tensor(rng.uniform(0.5, 1.0, (1, 2, 4, 4)))
    v = cost_volume(left, right, 2).values
    # channel (dy=-2, dx=-2) is index 0; at y<2 or x<2 the shifted view
    # leaves the image, so the correlation must be exactly zero
    assert np.all(v[0, 0, :2, :] == 0)
    assert np.all(v[0, 0, :, :2] == 0)
    assert np.all(v[0, 0, 2:, 2:] != 0)


def test_cost_volume_swap_symmetry():
    # V(L, R)[dy, dx](y, x) == V(R, L)[-dy, -dx](y + dy, x + dx) in bounds
    rng = np.random.default_rng(1)
    d = 2
    side = 2 * d + 1
    left = rng.uniform(-1, 1, (1, 3, 6, 7))
    right = rng.uniform(-1, 1, (1, 3, 6, 7))
    vlr = cost_volume(Tensor(left), Tensor(right), d).values
    vrl = cost_volume(Tensor(right), Tensor(left), d).values
    h, w = 6, 7
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            ch = (dy + d) * side + (dx + d)
            ch_r = (-dy + d) * side + (-dx + d)
            for y in range(max(0, -dy), min(h, h - dy)):
                for x in range(max(0, -dx), min(w, w - dx)):
                    np.testing.assert_allclose(
                        vlr[0, ch, y, x], vrl[0, ch_r, y + dy, x + dx], atol=1e-12
                    )


def test_cost_volume_channel_count():
    x = Tensor(np.zeros((1, 4, 8, 8)))
    assert cost_volume(x, x, 4).shape == (1, 81, 8, 8)
    assert cost_volume(x, x, 1).shape == (1, 9, 8, 8)


def test_cost_volume_shift_recovery():
    # smooth random features shifted horizontally: the argmax displacement
    # channel must recover the shift at >= 95% of interior pixels.  Per-pixel
    # unit-norm vectors make the product correlation peak at the true match.
    d = 3
    rng = np.random.default_rng(2)
    base = rng.uniform(-1, 1, (1, 12, 24, 24))
    k = np.ones((1, 1, 3, 3)) / 9.0
    smooth = conv2d(
        Tensor(base.reshape(12, 1, 24, 24)),
        ConvParams(Tensor(k), Tensor(np.zeros(1)), padding=1),
    ).values.reshape(1, 12, 24, 24)
    feat = smooth / np.sqrt((smooth ** 2).sum(axis=1, keepdims=True))
    for s in range(-d, d + 1):
        shifted = np.roll(feat, s, axis=3)
        v = cost_volume(Tensor(feat), Tensor(shifted), d).values
        best = v[0].argmax(axis=0)
        want = (0 + d) * (2 * d + 1) + (s + d)
        interior = best[d:-d, d:-d]
        assert (interior == want).mean() >= 0.95, f"shift {s} not recovered"


def test_deform_conv2d_matches_loop_oracle():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, c, oc = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
        x = rng.uniform(-1, 1, (n, c, h, w))
        wt = rng.uniform(-1, 1, (oc, c, 3, 3))
        b = rng.uniform(-1, 1, (oc,))
        off = rng.uniform(-2.0, 2.0, (n, 18, h, w))
        mod = rng.uniform(0.0, 1.0, (n, 9, h, w))
        got = deform_conv2d(
            Tensor(x), DeformKernel(Tensor(wt), Tensor(b)), Tensor(off), Tensor(mod)
        ).values
        want = oracles.deform_conv2d_loops(x, wt, b, off, mod)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


def test_deform_conv2d_reduces_to_conv2d():
    # zero offsets + unit modulation must equal plain 3x3 same-padding conv
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        n, c, oc = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        x = rng.uniform(-1, 1, (n, c, h, w)).astype(np.float32)
        wt = rng.uniform(-1, 1, (oc, c, 3, 3)).astype(np.float32)
        b = rng.uniform(-1, 1, (oc,)).astype(np.float32)
        off = Tensor(np.zeros((n, 18, h, w), dtype=np.float32))
        mod = Tensor(np.ones((n, 9, h, w), dtype=np.float32))
        got = deform_conv2d(Tensor(x), DeformKernel(Tensor(wt), Tensor(b)), off, mod).values
        want = conv2d(Tensor(x), ConvParams(Tensor(wt), Tensor(b), padding=1)).values
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-6)


def test_deform_conv2d_batch_equals_stacked_singles():
    rng = np.random.default_rng(5)
    n, c, h, w = 3, 2, 5, 6
    x = rng.uniform(-1, 1, (n, c, h, w))
    wt = Tensor(rng.uniform(-1, 1, (2, c, 3, 3)))
    b = Tensor(rng.uniform(-1, 1, (2,)))
    off = rng.uniform(-1.5, 1.5, (n, 18, h, w))
    mod = rng.uniform(0, 1, (n, 9, h, w))
    batched = deform_conv2d(Tensor(x), DeformKernel(wt, b), Tensor(off), Tensor(mod)).values
    singles = [
        deform_conv2d(
            Tensor(x[i : i + 1]), DeformKernel(wt, b), Tensor(off[i : i + 1]), Tensor(mod[i : i + 1])
        ).values
        for i in range(n)
    ]
    assert np.array_equal(batched, np.concatenate(singles))


def test_deform_conv2d_integer_offset_is_shift():
    # offset (0, 1) on every tap samples one pixel to the right
    rng = np.random.default_rng(6)
    x = rng.uniform(-1, 1, (1, 1, 5, 8))
    wt = np.zeros((1, 1, 3, 3))
    wt[0, 0, 1, 1] = 1.0  # center tap only
    off = np.zeros((1, 18, 5, 8))
    off[0, 9] = 1.0  # dx of the center tap k=4 lives in channel 2*4+1
    mod = np.ones((1, 9, 5, 8))
    out = deform_conv2d(
        Tensor(x), DeformKernel(Tensor(wt), Tensor(np.zeros(1))), Tensor(off), Tensor(mod)
    ).values
    np.testing.assert_allclose(out[0, 0, :, :-1], x[0, 0, :, 1:], atol=1e-12)
    np.testing.assert_allclose(out[0, 0, :, -1], 0.0, atol=1e-12)  # sampled past the edge


def test_deform_conv2d_validation():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    kern = DeformKernel(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ValueError, match="offsets"):
        deform_conv2d(x, kern, Tensor(np.zeros((1, 9, 4, 4))), Tensor(np.zeros((1, 9, 4, 4))))
    with pytest.raises(ValueError, match="modulation"):
        deform_conv2d(x, kern, Tensor(np.zeros((1, 18, 4, 4))), Tensor(np.zeros((1, 18, 4, 4))))
    bad = DeformKernel(Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ValueError, match="channel mismatch"):
        deform_conv2d(x, bad, Tensor(np.zeros((1, 18, 4, 4))), Tensor(np.zeros((1, 9, 4, 4))))


def test_split_offset_field_layout():
    rng = np.random.default_rng(7)
    raw = rng.uniform(-2, 2, (2, 27, 4, 4))
    offs, mod = split_offset_field(Tensor(raw))
    assert offs.shape == (2, 18, 4, 4)
    assert mod.shape == (2, 9, 4, 4)
    np.testing.assert_array_equal(offs.values, raw[:, :18])
    np.testing.assert_allclose(mod.values, 1 / (1 + np.exp(-raw[:, 18:])), atol=1e-12)
    assert np.all(mod.values > 0) and np.all(mod.values < 1)
    with pytest.raises(ValueError, match=r"3\*K channels"):
        split_offset_field(Tensor(rng.uniform(-1, 1, (1, 26, 4, 4))))


def test_zero_raw_field_gives_zero_offsets_and_half_modulation():
    offs, mod = split_offset_field(Tensor(np.zeros((1, 27, 3, 3))))
    assert np.all(offs.values == 0)
    assert np.all(mod.values == 0.5)


def test_offset_head_is_plain_conv():
    rng = np.random.default_rng(8)
    x = Tensor(rng.uniform(-1, 1, (1, 4, 5, 5)).astype(np.float32))
    w = Tensor(rng.uniform(-0.3, 0.3, (27, 4, 3, 3)).astype(np.float32))
    b = Tensor(np.zeros(27, dtype=np.float32))
    got = offset_head(x, ConvParams(w, b, padding=1)).values
    want = conv2d(x, ConvParams(w, b, padding=1)).values
    assert np.array_equal(got, want)
    with pytest.raises(ValueError, match=r"must be 3\*K"):
        offset_head(x, ConvParams(Tensor(np.zeros((26, 4, 3, 3), dtype=np.float32)),
                                  Tensor(np.zeros(26, dtype=np.float32)), padding=1))
