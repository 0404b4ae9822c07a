"""Minimal reverse-mode tensor engine scoped to the segmentation network."""
from sfuda3d.numerics.ops import (
    add,
    broadcast_spatial,
    channels_last,
    concat_channels,
    conv3d,
    cross_entropy,
    global_avg_pool,
    mul,
    relu,
    softmax_channel,
    sum_all,
    trilinear_upsample,
    weighted_sum,
)
from sfuda3d.numerics.optim import Adam, AdamState, adam_step
from sfuda3d.numerics.tensor import (
    Tensor,
    backward,
    default_dtype,
    float64_mode,
    format_graph,
    make_result,
    no_grad,
)

__all__ = [
    "Adam", "AdamState", "Tensor", "adam_step", "add", "backward", "broadcast_spatial",
    "channels_last", "concat_channels", "conv3d", "cross_entropy", "default_dtype",
    "float64_mode", "format_graph", "global_avg_pool", "make_result", "mul", "no_grad",
    "relu", "softmax_channel", "sum_all", "trilinear_upsample", "weighted_sum",
]
