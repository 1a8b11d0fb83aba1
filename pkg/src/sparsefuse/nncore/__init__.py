"""Minimal dense tensor engine with reverse-mode differentiation."""

from .tensor import (
    Tensor,
    ShapeError,
    no_grad,
    as_tensor,
    add,
    sub,
    mul,
    relu,
    sigmoid,
    exp,
    log,
    tabs,
    tsum,
    mean,
    amax,
    reshape,
    transpose,
    getitem,
    concat,
    stack,
    gather_rows,
    scatter_rows,
    segment_max,
    matmul,
    linear,
    softmax,
    layer_norm,
    conv2d,
    grid_sample,
    clamp_probs,
    gaussian_focal_loss,
    sigmoid_focal_loss,
)
from .params import ParamStore
from .layers import (
    AttentionConfig,
    Linear,
    LayerNorm,
    MLP,
    FFN,
    MultiHeadAttention,
    AttentionBlock,
    DeformableAttention,
    Conv2d,
    ChannelNorm,
    ConvNormAct,
    ResidualBlock,
    level_pixel_centres,
)
from .optim import AdamW, MissingGradError, adam_step
from .gradcheck import finite_diff_grad, relative_error, check_tensors
