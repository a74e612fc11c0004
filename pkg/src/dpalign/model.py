"""Encoder/decoder deblurring network with explicit dual-view alignment.

Both views run through a shared (by default) encoder; after every encoder
stage an encoder alignment module (EAM) warps the right features toward the
left using a correlation cost volume and modulated deformable convolution.
The decoder mirrors the schedule and re-aligns the skip features around the
growing decoder state with decoder alignment modules (DAMs) before each
fusion block.  All alignment parameters are per view; the final 3x3 conv
maps back to RGB.

Parameters live in a flat, insertion-ordered ``ParamStore`` keyed by
hierarchical names (``enc2.res1.conv1.weight``), which is also the
checkpoint entry order.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .align import DeformKernel, cost_volume, deform_conv2d, offset_head, split_offset_field
from .tensor import (
    ConvParams,
    Tensor,
    add,
    concat_channels,
    conv2d,
    maxpool2,
    relu,
    upsample_bilinear2,
)

EAM_CONTEXTS = ("corr_plus_features", "features_only", "corr_only")
LOSS_MODES = ("charbonnier", "mse")
SKIP_SOURCES = ("post_eam", "pre_eam")


@dataclass(frozen=True)
class NetConfig:
    """Architecture switches; the defaults are the desk-scale network."""

    blocks: int = 5             # encoder stages M (M - 1 paired with EAMs)
    base_channels: int = 16     # C0, doubled at every pooled stage
    corr_radius: int = 4        # cost-volume displacement radius d
    kernel_taps: int = 9        # deform kernel taps K (odd square)
    loss_mode: str = "charbonnier"
    share_encoder: bool = True
    use_pfem: bool = True
    use_eam: bool = True
    eam_context: str = "corr_plus_features"
    use_dam: bool = True
    skip_source: str = "post_eam"

    def __post_init__(self):
        if self.blocks < 2:
            raise ValueError(f"blocks must be >= 2, got {self.blocks}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.corr_radius < 0:
            raise ValueError(f"corr_radius must be >= 0, got {self.corr_radius}")
        k = math.isqrt(self.kernel_taps)
        if k * k != self.kernel_taps or k % 2 == 0:
            raise ValueError(f"kernel_taps must be an odd square (9, 25, ...), got {self.kernel_taps}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.eam_context not in EAM_CONTEXTS:
            raise ValueError(f"eam_context must be one of {EAM_CONTEXTS}, got {self.eam_context!r}")
        if self.skip_source not in SKIP_SOURCES:
            raise ValueError(f"skip_source must be one of {SKIP_SOURCES}, got {self.skip_source!r}")

    @property
    def deform_size(self):
        return math.isqrt(self.kernel_taps)

    def stage_channels(self, i):
        """Channels of encoder stage i in [1, blocks - 1]."""
        return self.base_channels * (2 ** (i - 1))

    def size_multiple(self):
        """Input spatial sizes must divide by this (pooling depth, and the
        two pyramid levels of the initial extractor when it is enabled)."""
        need = 2 ** (self.blocks - 2)
        if self.use_pfem:
            need = max(need, 4)
        return need


class ParamStore:
    """Insertion-ordered mapping from hierarchical name to parameter tensor."""

    def __init__(self):
        self._params = {}

    def add(self, name, tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor

    def __getitem__(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def copy_values(self):
        """Snapshot of parameter arrays, keyed by name."""
        return {k: np.array(t.values, copy=True) for k, t in self.items()}

    def load_values(self, values):
        for name, t in self.items():
            src = values[name]
            if src.shape != t.values.shape:
                raise ValueError(f"shape mismatch for {name!r}: {src.shape} vs {t.values.shape}")
            t.values = np.array(src, copy=True)


def _corr_channels(config):
    side = 2 * config.corr_radius + 1
    return side * side


def _eam_context_channels(config, stage_c):
    if config.eam_context == "corr_plus_features":
        return 2 * stage_c + _corr_channels(config)
    if config.eam_context == "features_only":
        return 2 * stage_c
    return _corr_channels(config)


def _decoder_plan(config):
    """Per decoder stage j in [1, M - 1]: (skip_c, prev_c, out_c)."""
    m = config.blocks
    plan = []
    prev_c = config.stage_channels(m - 1)
    for j in range(1, m):
        skip_c = config.stage_channels(m - j)
        out_c = config.stage_channels(m - j)
        plan.append((skip_c, prev_c, out_c))
        prev_c = out_c
    return plan


def layer_specs(config):
    """Every conv in forward order: (name, in_c, out_c, k, init).

    ``init`` is "he" for feature convs, "zero" for the closing conv of each
    residual branch (so ResBlocks start as identity and activation variance
    stays bounded at any depth), and "head" for offset heads (zero weights,
    positive modulation logits: alignment starts as identity offsets with
    near-unit modulation, i.e. a plain conv).
    """
    c0 = config.base_channels
    m = config.blocks
    taps = config.kernel_taps
    k = config.deform_size
    specs = []

    def conv(name, in_c, out_c, size=3, init="he"):
        specs.append((name, in_c, out_c, size, init))

    def block(prefix, in_c, out_c):
        conv(f"{prefix}.conv", in_c, out_c)
        for r in (1, 2):
            conv(f"{prefix}.res{r}.conv1", out_c, out_c)
            conv(f"{prefix}.res{r}.conv2", out_c, out_c, init="zero")

    views = ("",) if config.share_encoder else ("_l", "_r")
    for v in views:
        if config.use_pfem:
            conv(f"pfem{v}.lvl0", 3, c0)
            conv(f"pfem{v}.lvl1", c0, c0)
            conv(f"pfem{v}.lvl2", c0, c0)
            conv(f"pfem{v}.fuse", 3 * c0, c0, size=1)
        else:
            conv(f"stem{v}", 3, c0)
    for i in range(1, m):
        in_c = c0 if i == 1 else config.stage_channels(i - 1)
        out_c = config.stage_channels(i)
        for v in views:
            block(f"enc{i}{v}", in_c, out_c)
        if config.use_eam:
            ctx = _eam_context_channels(config, out_c)
            for v in ("l", "r"):
                conv(f"eam{i}.head_{v}", ctx, 3 * taps, init="head")
                conv(f"eam{i}.kern_{v}", out_c, out_c, size=k)
    top_c = config.stage_channels(m - 1)
    block("mid", 2 * top_c, top_c)
    for j, (skip_c, prev_c, out_c) in enumerate(_decoder_plan(config), start=1):
        if config.use_dam:
            ctx = 2 * skip_c + prev_c
            for v in ("l", "r"):
                conv(f"dam{j}.head_{v}", ctx, 3 * taps, init="head")
                conv(f"dam{j}.kern_{v}", skip_c, skip_c, size=k)
        block(f"dec{j}", 2 * skip_c + prev_c, out_c)
    conv("out", c0, 3)
    return specs


def expected_param_count(config):
    """Closed-form parameter count: sum over convs of in_c*out_c*k^2 + out_c."""
    return sum(in_c * out_c * k * k + out_c for _, in_c, out_c, k, _ in layer_specs(config))


# Offset heads start with this modulation logit, so alignment opens at
# sigmoid(2) ~ 0.88 of full strength.  A zero logit would gate every aligned
# feature to 0.5x, and on short schedules the head biases barely move, so the
# attenuation would persist for the whole run and drag early convergence.
MODULATION_LOGIT_INIT = 2.0


def init_params(config, seed, dtype=np.float32):
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, except:
    residual-branch closing convs start at zero so ResBlocks begin as
    identity (otherwise the stacked blocks roughly double activation
    variance each, which swamps desk-scale training runs), and offset heads
    start with zero weights and positive modulation logits so alignment
    modules begin as near-full-strength plain convs."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, in_c, out_c, k, init in layer_specs(config):
        if init in ("zero", "head"):
            weights = np.zeros((out_c, in_c, k, k), dtype=dtype)
        else:
            std = math.sqrt(2.0 / (in_c * k * k))
            weights = rng.normal(0.0, std, size=(out_c, in_c, k, k)).astype(dtype)
        bias = np.zeros(out_c, dtype=dtype)
        if init == "head":
            bias[2 * (out_c // 3):] = MODULATION_LOGIT_INIT
        store.add(f"{name}.weight", Tensor(weights, requires_grad=True))
        store.add(f"{name}.bias", Tensor(bias, requires_grad=True))
    return store


def _conv(store, name, x, padding=None):
    w = store[f"{name}.weight"]
    if padding is None:
        padding = (w.shape[2] - 1) // 2
    return conv2d(x, ConvParams(w, store[f"{name}.bias"], stride=1, padding=padding))


def _resblock(store, prefix, x):
    y = _conv(store, f"{prefix}.conv1", x)
    y = relu(y)
    y = _conv(store, f"{prefix}.conv2", y)
    return add(y, x)


def _block(store, prefix, x):
    x = relu(_conv(store, f"{prefix}.conv", x))
    x = _resblock(store, f"{prefix}.res1", x)
    return _resblock(store, f"{prefix}.res2", x)


def _view_suffix(config, view):
    return "" if config.share_encoder else f"_{view}"


def pfem_forward(x, store, config, view):
    """Initial feature extractor.

    Three-level pyramid: a full-resolution conv, two progressively pooled
    convs, the coarse levels bilinearly upsampled back, and a 1x1 fusion.
    With use_pfem off this is a single 3x3 conv.
    """
    v = _view_suffix(config, view)
    if not config.use_pfem:
        return relu(_conv(store, f"stem{v}", x))
    f0 = relu(_conv(store, f"pfem{v}.lvl0", x))
    f1 = relu(_conv(store, f"pfem{v}.lvl1", maxpool2(f0)))
    f2 = relu(_conv(store, f"pfem{v}.lvl2", maxpool2(f1)))
    up1 = upsample_bilinear2(f1)
    up2 = upsample_bilinear2(upsample_bilinear2(f2))
    return _conv(store, f"pfem{v}.fuse", concat_channels([f0, up1, up2]))


def encoder_block_forward(i, x, store, config, view):
    """Encoder stage i: 2x maxpool for i >= 2, then conv + two residual blocks."""
    if i >= 2:
        x = maxpool2(x)
    return _block(store, f"enc{i}{_view_suffix(config, view)}", x)


def eam_forward(i, left, right, store, config):
    """Encoder alignment at stage i; pass-through when use_eam is off."""
    if not config.use_eam:
        return left, right
    if config.eam_context == "features_only":
        context = concat_channels([left, right])
    else:
        corr = cost_volume(left, right, config.corr_radius)
        if config.eam_context == "corr_only":
            context = corr
        else:
            context = concat_channels([left, corr, right])
    out = []
    for v, feats in (("l", left), ("r", right)):
        w = store[f"eam{i}.head_{v}.weight"]
        raw = offset_head(context, ConvParams(w, store[f"eam{i}.head_{v}.bias"], padding=1))
        offs, mod = split_offset_field(raw)
        kern = DeformKernel(store[f"eam{i}.kern_{v}.weight"], store[f"eam{i}.kern_{v}.bias"])
        out.append(deform_conv2d(feats, kern, offs, mod))
    return out[0], out[1]


def encoder_bottleneck(left, right, store, config):
    """Deepest stage: fuse the two aligned views into the first decoder state."""
    return _block(store, "mid", concat_channels([left, right]))


def dam_forward(j, d_prev, left_skip, right_skip, store, config):
    """Decoder alignment at stage j.

    Upsamples the previous decoder state first (for j >= 2), then aligns
    both skip features around it.  Returns (left, right, d_prev_scaled);
    with use_dam off the skips pass through unchanged.
    """
    if j >= 2:
        d_prev = upsample_bilinear2(d_prev)
    if d_prev.shape[2:] != left_skip.shape[2:]:
        raise ValueError(
            f"decoder stage {j}: state {d_prev.shape} does not match skip "
            f"{left_skip.shape}; encoder/decoder schedule is inconsistent"
        )
    if not config.use_dam:
        return left_skip, right_skip, d_prev
    context = concat_channels([left_skip, d_prev, right_skip])
    out = []
    for v, feats in (("l", left_skip), ("r", right_skip)):
        w = store[f"dam{j}.head_{v}.weight"]
        raw = offset_head(context, ConvParams(w, store[f"dam{j}.head_{v}.bias"], padding=1))
        offs, mod = split_offset_field(raw)
        kern = DeformKernel(store[f"dam{j}.kern_{v}.weight"], store[f"dam{j}.kern_{v}.bias"])
        out.append(deform_conv2d(feats, kern, offs, mod))
    return out[0], out[1], d_prev


def decoder_block_forward(j, d_left, d_prev, d_right, store, config):
    """Decoder stage j < M: fuse [aligned_left, state, aligned_right];
    stage M: the final 3x3 conv to RGB."""
    if j == config.blocks:
        return _conv(store, "out", d_prev)
    return _block(store, f"dec{j}", concat_channels([d_left, d_prev, d_right]))


def deblur_forward(left, right, store, config, clamp=False):
    """Full restoration forward pass; ``clamp`` bounds the output to [0, 1]
    (inference only, the clamp is not graph-recorded)."""
    for name, t in (("left", left), ("right", right)):
        if t.values.ndim != 4 or t.shape[1] != 3:
            raise ValueError(f"{name} view must be (n, 3, h, w), got {t.shape}")
    if left.shape != right.shape:
        raise ValueError(f"view shape mismatch: {left.shape} vs {right.shape}")
    mult = config.size_multiple()
    _, _, h, w = left.shape
    if h % mult or w % mult:
        raise ValueError(f"input {h}x{w} must be a multiple of {mult} for this config")

    el = pfem_forward(left, store, config, "l")
    er = pfem_forward(right, store, config, "r")
    skips = []
    for i in range(1, config.blocks):
        el = encoder_block_forward(i, el, store, config, "l")
        er = encoder_block_forward(i, er, store, config, "r")
        pre = (el, er)
        el, er = eam_forward(i, el, er, store, config)
        skips.append(pre if config.skip_source == "pre_eam" else (el, er))
    d = encoder_bottleneck(el, er, store, config)
    for j in range(1, config.blocks):
        skip_l, skip_r = skips[config.blocks - 1 - j]
        dl, dr, d_prev = dam_forward(j, d, skip_l, skip_r, store, config)
        d = decoder_block_forward(j, dl, d_prev, dr, store, config)
    out = decoder_block_forward(config.blocks, None, d, None, store, config)
    if clamp:
        out = Tensor(np.clip(out.values, 0.0, 1.0))
    return out


def ablation_config(base, name):
    """The named single-switch variants used in the ablation study."""
    variants = {
        "full": {},
        "no_share": {"share_encoder": False},
        "no_pfem": {"use_pfem": False},
        "mse_loss": {"loss_mode": "mse"},
        "no_eam": {"use_eam": False},
        "eam_features_only": {"eam_context": "features_only"},
        "eam_corr_only": {"eam_context": "corr_only"},
        "no_dam": {"use_dam": False},
    }
    if name not in variants:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(variants)}")
    return replace(base, **variants[name])
