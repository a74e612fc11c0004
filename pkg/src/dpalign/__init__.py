"""Dual-pixel defocus deblurring with explicit view alignment."""

from .align import DeformKernel, cost_volume, deform_conv2d, offset_head, split_offset_field
from .gradcheck import finite_diff_check, gradient_suite
from .metrics import mae, psnr, ssim
from .model import (
    NetConfig,
    ParamStore,
    ablation_config,
    deblur_forward,
    expected_param_count,
    init_params,
    layer_specs,
)
from .synth import DpSample, LensModel, Scene, generate_scene, make_samples, render_dp_pair
from .tensor import (
    ConvParams,
    Tensor,
    add,
    backward,
    concat_channels,
    conv2d,
    leaky_relu,
    maxpool2,
    mul,
    no_grad,
    reduce_sum,
    relu,
    sigmoid,
    slice_channels,
    upsample_bilinear2,
)
from .train import AdamState, TrainConfig, adam_step, lr_at_epoch, reconstruction_loss, train_loop

__all__ = [name for name in dir() if not name.startswith("_")]
