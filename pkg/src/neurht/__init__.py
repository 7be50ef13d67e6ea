"""Desk-scale laboratory for model-extraction attacks, training-free output
watermarking, channel-capacity analysis, and statistical ownership claims."""

__version__ = "0.1.0"

from .numerics import RandomSource, clip01, mean_var, normal_cdf, softmax, z_quantile
from .nn import Mlp, TrainConfig, accuracy, grad, input_grad_sign, train
from .datagen import (
    Dataset,
    WatermarkSet,
    apply_trigger,
    gen_blobs,
    gen_composite_watermarks,
    left_half_mask,
    rotate90,
)
from .honeytrace import (
    DawnProtector,
    PredictionOut,
    ProtectedModel,
    ProtectionParams,
    confidence_gate,
    dawn_protect,
    flip_label,
    mix_logits,
    similarity,
)
from .channel import (
    ChannelReport,
    awgn_capacity,
    binary_entropy,
    discrete_entropy,
    hard_label_capacity,
    multi_step_aggregate,
    quantized_gaussian_entropy,
    rate_under_error,
    soft_label_capacity,
)
from .verify import (
    ClaimResult,
    claim_curve,
    measure_wsr,
    ownership_claim,
    required_sample_size,
)
