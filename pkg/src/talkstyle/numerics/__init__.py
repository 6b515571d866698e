from .adam import AdamState, UninitializedGradientError, adam_step, clip_grad_norm
from .gradcheck import DeterminismError, finite_diff_check
from .params import (
    CheckpointError,
    ParamStore,
    checkpoint_bytes,
    load_checkpoint,
    make_rng,
    parse_checkpoint,
    save_checkpoint,
    xavier_uniform,
)
from .tensor import (
    DegenerateRowError,
    DimensionError,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    col_slice,
    concat,
    index,
    layer_norm,
    leaky_relu,
    linear,
    linear_forward,
    matmul,
    matmul_rows,
    no_grad,
    mul,
    relu,
    reshape,
    row_slice,
    softmax_rows,
    square,
    stack_rows,
    sub,
    sum_squares,
    total,
    transpose,
)
