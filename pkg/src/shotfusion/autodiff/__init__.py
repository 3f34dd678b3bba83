from .tensor import (
    DEFAULT_DTYPE,
    AutodiffError,
    ContractError,
    DomainError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    current_tape,
    div,
    exp,
    getitem,
    is_grad_enabled,
    leaky_relu,
    log,
    matmul,
    mul,
    neg,
    no_grad,
    ones,
    power,
    record_op,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    stack,
    sub,
    tanh,
    transpose,
    zeros,
)
from .gradcheck import (
    finite_diff_grad,
    finite_diff_inplace,
    gradient_report,
    relative_error,
)
