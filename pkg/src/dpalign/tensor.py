"""Minimal reverse-mode autodiff over 4-axis numpy arrays.

Tensors hold (n, c, h, w) feature maps (weights are (out_c, in_c, kh, kw),
biases are flat vectors).  Every operation records a node on a thread-local
tape; ``backward`` walks the tape in exact reverse recording order, so
gradients are deterministic and accumulate additively across fan-out.
The graph is rebuilt on every forward pass.

Training runs in float32; gradient checking builds float64 tensors and the
same kernels run unchanged in double precision.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

_state = threading.local()


def _nodes():
    if not hasattr(_state, "nodes"):
        _state.nodes = []
        _state.grad_enabled = True
    return _state.nodes


def grad_enabled():
    _nodes()
    return _state.grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording (inference / finite-difference probes)."""
    _nodes()
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def clear_graph():
    """Drop any recorded nodes (a forward pass that will not be backpropped)."""
    _nodes().clear()


class Tensor:
    """Array container participating in the autodiff graph."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def detach(self):
        return Tensor(self.values)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}{flag})"


class _Node:
    __slots__ = ("inputs", "output", "fn")

    def __init__(self, inputs, output, fn):
        self.inputs = inputs
        self.output = output
        self.fn = fn


def record(inputs, values, backward_fn):
    """Wrap ``values`` in a Tensor and register its gradient rule.

    ``backward_fn(grad_out) -> tuple`` must return one gradient array (or
    None) per input, aligned with ``inputs``.
    """
    out = Tensor(values)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _nodes().append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(loss):
    """Backpropagate from a scalar-shaped (1, 1, 1, 1) loss tensor.

    Populates ``.grad`` on every requires_grad tensor in the recorded graph
    (zeros for tensors that do not reach the loss) and clears the tape.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ValueError(f"backward expects a (1, 1, 1, 1) loss, got shape {loss.shape}")
    nodes = _nodes()
    pending = {id(loss): np.ones_like(loss.values)}
    holders = {id(loss): loss}
    for node in reversed(nodes):
        out_grad = pending.pop(id(node.output), None)
        holders.pop(id(node.output), None)
        if out_grad is None:
            # No path to the loss: inputs still receive (zero) gradients.
            for t in node.inputs:
                if t.requires_grad and id(t) not in pending:
                    pending[id(t)] = np.zeros_like(t.values)
                    holders[id(t)] = t
            continue
        if node.output.requires_grad:
            node.output.grad = out_grad
        in_grads = node.fn(out_grad)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            acc = pending.get(id(t))
            pending[id(t)] = g if acc is None else acc + g
            holders[id(t)] = t
    for tid, g in pending.items():
        t = holders[tid]
        if t.requires_grad:
            t.grad = g
    nodes.clear()


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    """2D convolution parameters: weights (out_c, in_c, kh, kw), bias (out_c,)."""

    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0


def _check_4d(t, name):
    if t.values.ndim != 4:
        raise ValueError(f"{name} must be 4D (n, c, h, w), got shape {t.shape}")


def conv2d(x, params):
    """Cross-correlation with zero padding; output (n, out_c, h_out, w_out)."""
    _check_4d(x, "conv2d input")
    w = params.weights
    b = params.bias
    if w.values.ndim != 4:
        raise ValueError(f"conv2d weights must be 4D, got shape {w.shape}")
    out_c, in_c, kh, kw = w.shape
    n, c, h, wd = x.shape
    if c != in_c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    if b.shape != (out_c,):
        raise ValueError(f"conv2d bias must have shape ({out_c},), got {b.shape}")
    if x.dtype != w.values.dtype:
        raise ValueError(f"conv2d dtype mismatch: input {x.dtype} vs weights {w.values.dtype}")
    stride, pad = params.stride, params.padding
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise ValueError(
            f"conv2d output size is not integral for input {x.shape}, "
            f"kernel {w.shape}, stride {stride}, padding {pad}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}")

    xv, wv, bv = x.values, w.values, b.values

    def im2col(arr):
        ap = np.pad(arr, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else arr
        win = sliding_window_view(ap, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # (n, c, ho, wo, kh, kw) -> (n*ho*wo, c*kh*kw)
        return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)

    cols = im2col(xv)
    wmat = wv.reshape(out_c, c * kh * kw)
    out = cols @ wmat.T
    out += bv
    out = np.ascontiguousarray(out.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2))

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, out_c)
        grad_w = grad_b = grad_x = None
        if b.requires_grad:
            grad_b = g.sum(axis=(0, 2, 3))
        if w.requires_grad:
            grad_w = (gmat.T @ im2col(xv)).reshape(out_c, c, kh, kw)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            hp, wp = h + 2 * pad, wd + 2 * pad
            gpad = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    gpad[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                        gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                    )
            grad_x = gpad[:, :, pad : pad + h, pad : pad + wd] if pad else gpad
            grad_x = np.ascontiguousarray(grad_x)
        return grad_x, grad_w, grad_b

    return record([x, w, b], out, bw)


# ---------------------------------------------------------------------------
# activations


def relu(x):
    v = x.values

    def bw(g):
        return ((v > 0) * g,)

    return record([x], np.maximum(v, 0), bw)


def leaky_relu(x, slope=0.1):
    v = x.values

    def bw(g):
        return (np.where(v > 0, g, slope * g),)

    return record([x], np.where(v > 0, v, v * slope), bw)


def sigmoid(x):
    s = expit(x.values)

    def bw(g):
        return (g * s * (1 - s),)

    return record([x], s, bw)


# ---------------------------------------------------------------------------
# resampling


def maxpool2(x):
    """2x2 max pooling with stride 2; ties take the first window element
    in row-major order."""
    _check_4d(x, "maxpool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}; pad or crop the input")
    win = np.ascontiguousarray(
        x.values.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(gx),)

    return record([x], out, bw)


_upsample_cache = {}


def _upsample_matrix(size, dtype):
    """Dense (2*size, size) map for 2x bilinear interpolation along one axis:
    output i samples input at (i + 0.5) / 2 - 0.5, clamped to [0, size - 1]."""
    key = (size, np.dtype(dtype).str)
    mat = _upsample_cache.get(key)
    if mat is None:
        mat = np.zeros((2 * size, size), dtype=dtype)
        for i in range(2 * size):
            src = min(max((i + 0.5) / 2 - 0.5, 0.0), size - 1.0)
            i0 = int(np.floor(src))
            f = src - i0
            i1 = min(i0 + 1, size - 1)
            mat[i, i0] += 1 - f
            mat[i, i1] += f
        _upsample_cache[key] = mat
    return mat


def upsample_bilinear2(x):
    """2x bilinear upsampling (separable, edge-clamped sampling grid)."""
    _check_4d(x, "upsample_bilinear2 input")
    n, c, h, w = x.shape
    ah = _upsample_matrix(h, x.dtype)
    aw = _upsample_matrix(w, x.dtype)
    out = np.matmul(np.matmul(ah, x.values), aw.T)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return record([x], out, bw)


# ---------------------------------------------------------------------------
# shape plumbing


def concat_channels(inputs):
    """Concatenate along the channel axis; other axes must match exactly."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    first = inputs[0]
    _check_4d(first, "concat_channels input 0")
    for i, t in enumerate(inputs[1:], start=1):
        _check_4d(t, f"concat_channels input {i}")
        same = (t.shape[0], t.shape[2], t.shape[3]) == (first.shape[0], first.shape[2], first.shape[3])
        if t.dtype != first.dtype or not same:
            raise ValueError(
                f"concat_channels input {i} has shape {t.shape} ({t.dtype}), "
                f"incompatible with input 0 shape {first.shape} ({first.dtype})"
            )
    splits = np.cumsum([t.shape[1] for t in inputs])[:-1]
    out = np.concatenate([t.values for t in inputs], axis=1)

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return record(list(inputs), out, bw)


def slice_channels(x, start, stop):
    """Channel range [start, stop) as a new tensor."""
    _check_4d(x, "slice_channels input")
    c = x.shape[1]
    if not (0 <= start < stop <= c):
        raise ValueError(f"slice_channels range [{start}, {stop}) invalid for {c} channels")
    out = np.ascontiguousarray(x.values[:, start:stop])

    def bw(g):
        gx = np.zeros_like(x.values)
        gx[:, start:stop] = g
        return (gx,)

    return record([x], out, bw)


def add(a, b):
    """Elementwise sum; shapes must match exactly."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        return g, g

    return record([a, b], a.values + b.values, bw)


def mul(a, b):
    """Elementwise (Hadamard) product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bw(g):
        return g * b.values, g * a.values

    return record([a, b], a.values * b.values, bw)


def reduce_sum(x):
    """Sum all elements into a (1, 1, 1, 1) scalar tensor."""
    out = np.asarray(x.values.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)

    def bw(g):
        return (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype, copy=True),)

    return record([x], out, bw)
