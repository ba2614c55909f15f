from .autodiff import (NonFiniteError, Tape, TapeError, Tensor, add, backward, concat_last, constant,
                       log, log_sigmoid, log_softmax, matmul, mul, pick_last, scale, sigmoid, slice_axis,
                       softmax, softmax_op, take_rows, tanh, total, transpose_last)
from .gradcheck import (DEFAULT_STEP, FDReport, batched_central_differences, directional_check,
                        finite_difference_check, scaled_max_error)
from .params import ParamVector, ShapeMismatch, inner

__all__ = [
    "DEFAULT_STEP", "FDReport", "NonFiniteError", "ParamVector", "ShapeMismatch", "Tape", "TapeError", "Tensor",
    "batched_central_differences", "add", "backward", "concat_last", "constant", "directional_check", "finite_difference_check",
    "inner", "log", "log_sigmoid", "log_softmax", "matmul", "mul", "pick_last", "scale", "scaled_max_error",
    "sigmoid", "slice_axis", "softmax", "softmax_op", "take_rows", "tanh", "total", "transpose_last",
]
