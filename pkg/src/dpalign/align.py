"""Alignment operators: correlation cost volume and modulated deformable
convolution.

The cost volume scores every integer displacement within an L-inf radius
``d`` by a channel-averaged dot product between the two views.  The
deformable convolution then samples each kernel tap at a learned fractional
offset, scales it by a learned modulation in (0, 1), and reduces with an
ordinary convolution kernel.  With zero offsets and unit modulation it
collapses to ``conv2d`` with the same weights.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, conv2d, record, sigmoid, slice_channels


def cost_volume(left, right, radius):
    """Correlation cost volume over displacements |dy|, |dx| <= radius.

    Output channel (dy + d) * (2d + 1) + (dx + d) at (y, x) holds
    mean_c(left[c, y, x] * right[c, y + dy, x + dx]); displacements that
    leave the image contribute exactly 0.
    """
    if left.shape != right.shape:
        raise ValueError(f"cost_volume shape mismatch: {left.shape} vs {right.shape}")
    if left.values.ndim != 4:
        raise ValueError(f"cost_volume inputs must be 4D, got {left.shape}")
    d = int(radius)
    if d < 0:
        raise ValueError(f"cost_volume radius must be >= 0, got {radius}")
    n, c, h, w = left.shape
    if c < 1:
        raise ValueError("cost_volume needs at least one channel")
    side = 2 * d + 1
    lv = left.values
    rpad = np.pad(right.values, ((0, 0), (0, 0), (d, d), (d, d)))
    out = np.empty((n, side * side, h, w), dtype=lv.dtype)
    inv_c = 1.0 / c
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            win = rpad[:, :, d + dy : d + dy + h, d + dx : d + dx + w]
            idx = (dy + d) * side + (dx + d)
            np.einsum("nchw,nchw->nhw", lv, win, out=out[:, idx], optimize=True)
    out *= inv_c

    def bw(g):
        gl = np.zeros_like(lv)
        grpad = np.zeros_like(rpad)
        for dy in range(-d, d + 1):
            for dx in range(-d, d + 1):
                idx = (dy + d) * side + (dx + d)
                gi = g[:, idx : idx + 1] * inv_c
                gl += gi * rpad[:, :, d + dy : d + dy + h, d + dx : d + dx + w]
                grpad[:, :, d + dy : d + dy + h, d + dx : d + dx + w] += gi * lv
        gr = np.ascontiguousarray(grpad[:, :, d : d + h, d : d + w])
        return gl, gr

    return record([left, right], out, bw)


def offset_head(features, params):
    """Offset/modulation predictor: a conv whose output carries 3K channels
    (2K raw offsets then K modulation logits) for a K-tap deform kernel."""
    out_c = params.weights.shape[0]
    if out_c % 3:
        raise ValueError(f"offset_head output channels must be 3*K, got {out_c}")
    return conv2d(features, params)


def split_offset_field(raw):
    """Split a 3K-channel field into ((dy, dx) pairs, sigmoid modulation).

    Offsets keep the raw head output: channel 2k is the vertical and 2k + 1
    the horizontal offset of tap k.  The trailing K channels pass through a
    sigmoid, so modulation lives in (0, 1).
    """
    c = raw.shape[1]
    if c % 3:
        raise ValueError(f"split_offset_field needs 3*K channels, got {c}")
    k = c // 3
    offsets = slice_channels(raw, 0, 2 * k)
    modulation = sigmoid(slice_channels(raw, 2 * k, 3 * k))
    return offsets, modulation


@dataclass
class DeformKernel:
    """Weights (out_c, in_c, k, k) and bias (out_c,) of a deformable conv.

    The tap grid is the usual row-major k x k lattice around the output
    pixel, e.g. (-1,-1) ... (1,1) for k = 3.
    """

    weights: Tensor
    bias: Tensor


def _tap_grid(k):
    half = (k - 1) // 2
    taps = [(dy, dx) for dy in range(-half, half + 1) for dx in range(-half, half + 1)]
    return np.array(taps, dtype=np.float64)


def deform_conv2d(x, kernel, offsets, modulation):
    """Modulated deformable convolution (stride 1, zero-padded sampling).

    out[p] = sum_k w_k . sample(x, p + tap_k + offset_k[p]) * mod_k[p] + bias.
    Sampling is bilinear; taps whose four neighbours all fall outside the
    image contribute 0, and partially outside neighbours count as 0-valued
    pixels.  Gradients flow to the input, weights, bias, offsets and
    modulation; the offset gradient takes the right-continuous bilinear
    branch at integer sample positions.
    """
    w, b = kernel.weights, kernel.bias
    out_c, in_c, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"deform_conv2d needs an odd square kernel, got {w.shape}")
    taps = kh * kw
    n, c, h, wd = x.shape
    if c != in_c:
        raise ValueError(f"deform_conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    if offsets.shape != (n, 2 * taps, h, wd):
        raise ValueError(
            f"deform_conv2d offsets must be (n, {2 * taps}, h, w), got {offsets.shape}"
        )
    if modulation.shape != (n, taps, h, wd):
        raise ValueError(
            f"deform_conv2d modulation must be (n, {taps}, h, w), got {modulation.shape}"
        )
    if x.dtype != w.values.dtype:
        raise ValueError(f"deform_conv2d dtype mismatch: {x.dtype} vs {w.values.dtype}")

    xv = x.values
    hw = h * wd
    grid = _tap_grid(kh)
    base_y = np.arange(h, dtype=np.float64)[:, None]
    base_x = np.arange(wd, dtype=np.float64)[None, :]

    def geometry(off_values):
        off = off_values.reshape(n, taps, 2, h, wd).astype(np.float64, copy=False)
        sy = base_y + grid[:, 0][None, :, None, None] + off[:, :, 0]
        sx = base_x + grid[:, 1][None, :, None, None] + off[:, :, 1]
        y0 = np.floor(sy)
        x0 = np.floor(sx)
        fy = (sy - y0).astype(xv.dtype)
        fx = (sx - x0).astype(xv.dtype)
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        return y0, x0, fy, fx

    def corner(flat, y, xc):
        inb = (y >= 0) & (y < h) & (xc >= 0) & (xc < wd)
        idx = np.clip(y * wd + xc, 0, hw - 1).reshape(n, 1, taps * hw)
        vals = np.take_along_axis(flat, idx, axis=2)
        vals *= inb.reshape(n, 1, taps * hw)
        return vals, inb

    corner_w = ((0, 0), (0, 1), (1, 0), (1, 1))

    def gather(off_values):
        """Bilinear samples per tap: (n, c, taps * h * w) plus geometry."""
        y0, x0, fy, fx = geometry(off_values)
        flat = xv.reshape(n, c, hw)
        parts = []
        for ay, ax in corner_w:
            wgt = (fy if ay else 1 - fy) * (fx if ax else 1 - fx)
            vals, _ = corner(flat, y0 + ay, x0 + ax)
            parts.append((vals, wgt))
        sampled = np.zeros((n, c, taps * hw), dtype=xv.dtype)
        for vals, wgt in parts:
            sampled += vals * wgt.reshape(n, 1, taps * hw)
        return sampled, (y0, x0, fy, fx), parts

    sampled, _, _ = gather(offsets.values)
    mod = modulation.values.reshape(n, 1, taps, hw)
    modulated = (sampled.reshape(n, c, taps, hw) * mod).reshape(n, c * taps, hw)
    wmat = w.values.reshape(out_c, c * taps)
    out = np.matmul(wmat, modulated)
    out += b.values[:, None]
    out = out.reshape(n, out_c, h, wd)

    def bw(g):
        gflat = g.reshape(n, out_c, hw)
        # Recompute sampling geometry instead of holding corner buffers alive.
        sampled2, (y0, x0, fy, fx), parts = gather(offsets.values)
        modulated2 = (sampled2.reshape(n, c, taps, hw) * mod).reshape(n, c * taps, hw)

        grad_w = grad_b = None
        if b.requires_grad:
            grad_b = g.sum(axis=(0, 2, 3))
        if w.requires_grad:
            grad_w = np.matmul(gflat, modulated2.transpose(0, 2, 1)).sum(axis=0)
            grad_w = grad_w.reshape(out_c, c, kh, kw)

        gmodulated = np.matmul(wmat.T, gflat).reshape(n, c, taps, hw)
        grad_mod = None
        if modulation.requires_grad:
            grad_mod = (gmodulated * sampled2.reshape(n, c, taps, hw)).sum(axis=1)
            grad_mod = grad_mod.reshape(n, taps, h, wd)
        gsampled = (gmodulated * mod).reshape(n, c, taps * hw)

        grad_x = None
        if x.requires_grad:
            acc = np.zeros((c, n * hw), dtype=np.float64)
            base = (np.arange(n, dtype=np.int64) * hw).reshape(n, 1, 1, 1)
            idx_parts = []
            val_parts = []
            for (ay, ax), (_, wgt) in zip(corner_w, parts):
                y = y0 + ay
                xc = x0 + ax
                inb = (y >= 0) & (y < h) & (xc >= 0) & (xc < wd)
                idx = np.clip(y * wd + xc, 0, hw - 1) + base
                scale = (wgt * inb).reshape(n, 1, taps * hw)
                idx_parts.append(idx.reshape(-1))
                val_parts.append(gsampled * scale)
            big_idx = np.concatenate(idx_parts)
            big_vals = np.concatenate(
                [v.transpose(1, 0, 2).reshape(c, -1) for v in val_parts], axis=1
            )
            for ci in range(c):
                acc[ci] += np.bincount(big_idx, weights=big_vals[ci], minlength=n * hw)
            grad_x = acc.reshape(c, n, hw).transpose(1, 0, 2).reshape(n, c, h, wd)
            grad_x = np.ascontiguousarray(grad_x.astype(xv.dtype, copy=False))

        grad_off = None
        if offsets.requires_grad:
            v00, v01, v10, v11 = (p[0] for p in parts)
            dfy = (1 - fx).reshape(n, 1, -1) * (v10 - v00) + fx.reshape(n, 1, -1) * (v11 - v01)
            dfx = (1 - fy).reshape(n, 1, -1) * (v01 - v00) + fy.reshape(n, 1, -1) * (v11 - v10)
            gy = (gsampled * dfy).sum(axis=1).reshape(n, taps, h, wd)
            gx = (gsampled * dfx).sum(axis=1).reshape(n, taps, h, wd)
            grad_off = np.stack([gy, gx], axis=2).reshape(n, 2 * taps, h, wd)

        return grad_x, grad_w, grad_b, grad_off, grad_mod

    return record([x, w, b, offsets, modulation], out, bw)
