"""Recurrent convolutional fusion of RGB and depth streams.

A self-contained numpy-based deep learning engine (tensors with reverse-mode
autodiff, layers, optimizers) plus the two-stream fusion model it exists to
train: twin residual backbones tapped at five depths, per-tap projections to
a common space, recurrent aggregation with a GRU, and a classification loss
regularized by a cross-modal orthogonality penalty.
"""

from .tensor import (
    Tensor,
    TapeNode,
    ShapeError,
    set_nan_checks,
    add,
    sub,
    mul,
    div,
    neg,
    exp,
    log,
    sqrt,
    tensor_sum,
    tensor_mean,
    matmul,
    transpose,
    reshape,
    concat,
    elementwise_activation,
    relu,
    sigmoid,
    tanh,
    softmax,
    conv2d,
    max_pool2d,
    global_max_pool,
    backward,
    zero_grads,
)
from .gradcheck import finite_difference_check, parameter_gradient_errors
from .layers import (
    LinearParams,
    BatchNormParams,
    GruParams,
    ResidualStageConfig,
    xavier_init,
    linear_forward,
    batch_norm_forward,
    residual_block_forward,
    build_backbone,
    gru_cell_step,
    gru_sequence,
    dropout,
)
from .model import (
    ModelConfig,
    FusionOutputs,
    FusionModel,
    build_fusion_model,
    desk_scale_stages,
    fusion_forward,
    projection_block_forward,
    concat_modalities,
    classification_loss,
    orthogonality_loss,
    total_loss,
    lambda_schedule,
    predict,
)
from .optim import (
    RmspropState,
    MaxNormConfig,
    sgd_step,
    rmsprop_init,
    rmsprop_step,
    max_norm_constraint,
    multi_start_init,
    Rmsprop,
)
from .data import (
    Sample,
    SplitSpec,
    SyntheticSpec,
    depth_to_surface_normals,
    colorize_normals,
    colorize_depth,
    augment,
    make_split,
    make_synthetic_dataset,
    make_synthetic_xor_dataset,
    load_dataset,
    export_dataset_layout,
)
from .harness import (
    RunConfig,
    MetricsRecord,
    PerClassAccuracy,
    parse_run_config,
    train,
    evaluate,
    run_ablation,
    export_features,
)

__version__ = "0.1.0"
