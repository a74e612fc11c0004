"""Losses, Adam, the learning-rate schedule and the training loop."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .model import deblur_forward, init_params
from .tensor import Tensor, backward, no_grad, record


@dataclass
class TrainConfig:
    initial_lr: float = 2e-5
    lr_half_period: int = 60    # epochs between halvings
    total_epochs: int = 150
    batch_size: int = 4
    patch_size: int = 64        # random square crop fed to the network
    loss_eps: float = 1e-3      # charbonnier epsilon
    val_fraction: float = 0.1
    seed: int = 0


def lr_at_epoch(epoch, config):
    """Step schedule: the initial rate halved every lr_half_period epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.initial_lr * 0.5 ** (epoch // config.lr_half_period)


def reconstruction_loss(pred, target, mode="charbonnier", eps=1e-3):
    """Scalar (1, 1, 1, 1) loss tensor.

    charbonnier: mean of sqrt(diff^2 + eps^2) per pixel (computed as
    hypot, reduced with exactly-rounded summation, so identical inputs
    give exactly eps).  mse: mean squared difference.
    """
    if pred.shape != target.shape:
        raise ValueError(f"loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = (pred.values.astype(np.float64, copy=False) - target.values).astype(np.float64)
    n = diff.size
    if mode == "charbonnier":
        root = np.hypot(diff, eps)
        value = math.fsum(root.reshape(-1)) / n

        def bw(g):
            gp = (float(g.reshape(())) / n) * (diff / root)
            return (gp.astype(pred.dtype, copy=False), None)

    elif mode == "mse":
        value = math.fsum((diff * diff).reshape(-1)) / n

        def bw(g):
            gp = (float(g.reshape(())) * 2.0 / n) * diff
            return (gp.astype(pred.dtype, copy=False), None)

    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    out = np.array(value, dtype=np.float64).reshape(1, 1, 1, 1)
    return record([pred, target], out, bw)


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers and the shared step count."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store, state, lr):
    """One bias-corrected Adam update over every parameter in the store."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in store.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward first")
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.values = p.values - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class TrainResult:
    params: object               # final ParamStore
    best_values: dict            # snapshot with the best validation PSNR
    best_epoch: int
    log_lines: list              # csv rows: epoch,lr,mean_loss,val_psnr,val_ssim,val_mae
    train_ids: list
    val_ids: list


LOG_HEADER = "epoch,lr,mean_loss,val_psnr,val_ssim,val_mae"


def split_dataset(n, config):
    """Seeded shuffle split; max(1, round(val_fraction * n)) validation items."""
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    order = np.random.default_rng(config.seed).permutation(n)
    n_val = max(1, int(round(config.val_fraction * n)))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _crop(arrs, rng, patch):
    h, w = arrs[0].shape[-2:]
    if patch > h or patch > w:
        raise ValueError(f"patch_size {patch} exceeds image {h}x{w}")
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    return [a[..., y : y + patch, x : x + patch] for a in arrs]


def evaluate(samples, store, net_config):
    """Mean (psnr, ssim, mae) of clamped restorations against the sharp view."""
    scores = []
    with no_grad():
        for s in samples:
            left = Tensor(s.left[None].astype(np.float32))
            right = Tensor(s.right[None].astype(np.float32))
            out = deblur_forward(left, right, store, net_config, clamp=True).values[0]
            sharp = s.sharp.astype(np.float64)
            scores.append((metrics.psnr(out, sharp), metrics.ssim(out, sharp), metrics.mae(out, sharp)))
    m = np.array(scores, dtype=np.float64).mean(axis=0)
    return float(m[0]), float(m[1]), float(m[2])


def train_loop(samples, net_config, config, progress=None):
    """Train on DpSample triplets; returns the final parameters, the best
    validation snapshot and per-epoch log rows.  Fully deterministic for a
    fixed (samples, config) pair."""
    train_ids, val_ids = split_dataset(len(samples), config)
    train_set = [samples[i] for i in train_ids]
    val_set = [samples[i] for i in val_ids]

    store = init_params(net_config, config.seed)
    state = AdamState()
    rng = np.random.default_rng(config.seed + 1)
    log_lines = []
    best_psnr = -np.inf
    best_values = store.copy_values()
    best_epoch = -1

    for epoch in range(config.total_epochs):
        lr = lr_at_epoch(epoch, config)
        order = rng.permutation(len(train_set))
        losses = []
        weights = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[start : start + config.batch_size]]
            lefts, rights, sharps = [], [], []
            for s in batch:
                l, r, sh = _crop([s.left, s.right, s.sharp], rng, config.patch_size)
                lefts.append(l)
                rights.append(r)
                sharps.append(sh)
            left = Tensor(np.stack(lefts).astype(np.float32))
            right = Tensor(np.stack(rights).astype(np.float32))
            target = Tensor(np.stack(sharps).astype(np.float32))
            pred = deblur_forward(left, right, store, net_config)
            loss = reconstruction_loss(pred, target, net_config.loss_mode, config.loss_eps)
            backward(loss)
            adam_step(store, state, lr)
            store.zero_grads()
            losses.append(float(loss.values.reshape(())))
            weights.append(len(batch))
        mean_loss = float(np.average(losses, weights=weights))
        val_psnr, val_ssim, val_mae = evaluate(val_set, store, net_config)
        row = f"{epoch},{lr!r},{mean_loss!r},{val_psnr!r},{val_ssim!r},{val_mae!r}"
        log_lines.append(row)
        if val_psnr > best_psnr:
            best_psnr = val_psnr
            best_values = store.copy_values()
            best_epoch = epoch
        if progress is not None:
            progress(epoch, row)

    return TrainResult(store, best_values, best_epoch, log_lines, train_ids, val_ids)
