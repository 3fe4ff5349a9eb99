"""Tensor engine: autodiff kernels, seeded randomness, resampling, records."""

from .gradcheck import DEFAULT_TOLERANCE, GradCheckReport, grad_check
from .interpolate import bicubic_resize_2d, bilinear_resize
from .recordio import (
    load_tensor,
    named_list_bytes,
    parse_named_list,
    parse_tensor_record,
    save_tensor,
    tensor_record_bytes,
)
from .rng import Rng
from .tensor import (
    CROSS_ENTROPY_EPS,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp_min,
    concat,
    cross_entropy_rows,
    default_dtype,
    div,
    exp,
    gather_rows,
    gelu,
    get_default_dtype,
    l2_normalize_rows,
    layer_norm,
    log,
    matmul,
    mul,
    narrow,
    no_grad,
    ones,
    reshape,
    scalar,
    scale,
    set_default_dtype,
    softmax_t,
    sqrt,
    tensor_mean,
    tensor_sum,
    transpose,
    zeros,
)

__all__ = [
    "CROSS_ENTROPY_EPS",
    "DEFAULT_TOLERANCE",
    "GradCheckReport",
    "Rng",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "bicubic_resize_2d",
    "bilinear_resize",
    "clamp_min",
    "concat",
    "cross_entropy_rows",
    "default_dtype",
    "div",
    "exp",
    "gather_rows",
    "gelu",
    "get_default_dtype",
    "grad_check",
    "l2_normalize_rows",
    "layer_norm",
    "load_tensor",
    "log",
    "matmul",
    "mul",
    "named_list_bytes",
    "narrow",
    "no_grad",
    "ones",
    "parse_named_list",
    "parse_tensor_record",
    "reshape",
    "save_tensor",
    "scalar",
    "scale",
    "set_default_dtype",
    "softmax_t",
    "sqrt",
    "tensor_mean",
    "tensor_sum",
    "transpose",
    "zeros",
]
