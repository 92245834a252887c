"""Tape-based reverse-mode autodiff on dense float64/complex128 arrays."""

from .tensor import (
    COMPLEX,
    REAL,
    GradientTape,
    Tensor,
    as_tensor,
    gradients,
    make_op,
    parameter,
)
from .ops import (
    ACTIVATIONS,
    absolute,
    add,
    concat,
    conv2d,
    conv3d,
    elementwise,
    fft_axis,
    gelu,
    imag_part,
    mean_all,
    mul,
    neg,
    pointwise_linear,
    real_part,
    relu,
    resample_axis,
    reshape,
    scale,
    slice_axis,
    spectral_conv_1d,
    sub,
    sum_all,
    sum_axes,
)

__all__ = [
    "COMPLEX",
    "REAL",
    "GradientTape",
    "Tensor",
    "as_tensor",
    "gradients",
    "make_op",
    "parameter",
    "ACTIVATIONS",
    "absolute",
    "add",
    "concat",
    "conv2d",
    "conv3d",
    "elementwise",
    "fft_axis",
    "gelu",
    "imag_part",
    "mean_all",
    "mul",
    "neg",
    "pointwise_linear",
    "real_part",
    "relu",
    "resample_axis",
    "reshape",
    "scale",
    "slice_axis",
    "spectral_conv_1d",
    "sub",
    "sum_all",
    "sum_axes",
]
