"""Float64 tensors, reverse-mode autodiff, Adam."""
from .conv import avg_pool2d, conv2d, global_avg_pool2d
from .gradcheck import GradCheckReport, grad_check
from .optim import AdamState, MissingGradError, adam_step, zero_grad
from .tensor import (
    BackwardError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    clamp_min,
    concat,
    cosine_similarity,
    cross_entropy,
    detach,
    diagnostics,
    div,
    elu,
    exp,
    leaky_relu,
    linear,
    log,
    log_softmax_rows,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    normalize_rows,
    power,
    relu,
    reshape,
    segment_max,
    segment_mean,
    segment_sum,
    sigmoid,
    softmax_rows,
    sqrt,
    sub,
    sum_,
    take,
    trace_kinks,
    transpose,
)

