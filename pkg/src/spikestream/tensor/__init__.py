from .autograd import (
    ContractError,
    DimensionError,
    Node,
    Tape,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    parameter,
    power,
    reshape,
    sqrt,
    stack,
    sub,
    sum_,
    take,
    tanh,
    transpose,
)
from .gradcheck import GradCheckReport, finite_difference_check, relative_error
from .nn import (
    BatchNormState,
    ConfigurationError,
    batch_norm,
    conv1d,
    conv1d_channels_last,
    layer_norm,
    linear,
    sinusoid_table,
)
