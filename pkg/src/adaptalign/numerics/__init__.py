from .gradcheck import GradCheckReport, finite_diff_check, relative_error
from .ops import (
    ConvSpec,
    apply_resblock,
    bilinear_gather,
    bilinear_sample,
    channel_concat_split,
    concat,
    conv2d,
    deformable_conv,
    elementwise,
    leaky_relu,
    sigmoid,
    split,
)
from .tensor import Tensor, default_dtype, get_default_dtype, is_grad_enabled, no_grad, set_default_dtype

__all__ = [
    "ConvSpec",
    "GradCheckReport",
    "Tensor",
    "apply_resblock",
    "bilinear_gather",
    "bilinear_sample",
    "channel_concat_split",
    "concat",
    "conv2d",
    "default_dtype",
    "deformable_conv",
    "elementwise",
    "finite_diff_check",
    "get_default_dtype",
    "is_grad_enabled",
    "leaky_relu",
    "no_grad",
    "relative_error",
    "set_default_dtype",
    "sigmoid",
    "split",
]
