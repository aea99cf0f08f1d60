from treeground.numerics.checkpoint import decode_params, encode_params, load_checkpoint, save_checkpoint
from treeground.numerics.optim import OptimizerState, optimizer_step, scheduled_lr
from treeground.numerics.tensor import (
    PRIMITIVES,
    Tape,
    Tensor,
    abs_,
    active_tape,
    add,
    apply_primitive,
    backward,
    concat,
    cosine_similarity,
    div,
    embed_lookup,
    l2_distance,
    layernorm_lastdim,
    log,
    log_sigmoid,
    matmul,
    maximum,
    maxpool_spatial,
    mean_lastdim,
    minimum,
    mul_elementwise,
    permute,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_lastdim,
    sub,
    sum_all,
    take,
    unfold3x3,
)
