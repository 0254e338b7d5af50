"""Two-stream fusion assembly.

Twin tapped backbones (RGB and colorized depth), one projection block per
tap and stream mapping feature maps to fixed-length vectors in a common
space, per-tap concatenation, a GRU folding the tap sequence from lowest to
highest abstraction, and a linear classifier with softmax. The training
objective is cross-entropy plus a lambda-weighted squared Frobenius norm of
the cross-Gram matrix between projected RGB and depth batch features, which
pushes the two streams toward complementary information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    concat,
    conv2d,
    exp,
    log,
    matmul,
    mul,
    relu,
    softmax,
    sub,
    tensor_mean,
    tensor_sum,
    transpose,
)
from .layers import (
    Backbone,
    ConvUnit,
    GruParams,
    LinearParams,
    ResidualStageConfig,
    _conv_init,
    build_backbone,
    gru_init,
    gru_sequence,
    linear_forward,
    linear_init,
)

__all__ = [
    "ModelConfig",
    "FusionOutputs",
    "ProjectionBlock",
    "FusionModel",
    "desk_scale_stages",
    "build_fusion_model",
    "projection_block_forward",
    "concat_modalities",
    "fusion_forward",
    "classification_loss",
    "orthogonality_loss",
    "total_loss",
    "lambda_schedule",
    "predict",
]


def desk_scale_stages(widths: Sequence[int] = (8, 8, 16, 32, 64),
                      blocks: Sequence[int] = (1, 1, 1, 1, 1),
                      strides: Sequence[int] = (1, 1, 2, 2, 2),
                      in_channels: int = 3) -> Tuple[ResidualStageConfig, ...]:
    """Five-stage staging with reduced widths for small inputs."""
    if not (len(widths) == len(blocks) == len(strides) == 5):
        raise ValueError("desk_scale_stages needs 5 widths, 5 block counts, 5 strides")
    chain = [in_channels] + list(widths)
    return tuple(
        ResidualStageConfig(chain[i], chain[i + 1], blocks[i], strides[i]) for i in range(5)
    )


@dataclass
class ModelConfig:
    num_classes: int
    tap_first: int = 3
    tap_last: int = 5
    pd: int = 512
    mn: int = 50
    lambda_base: float = 1e-4
    lambda_decay: float = 0.5
    lambda_zero_above: int = 4
    stages: Tuple[ResidualStageConfig, ...] = field(default_factory=desk_scale_stages)
    in_channels: int = 3

    def __post_init__(self):
        if not (1 <= self.tap_first <= self.tap_last <= 5):
            raise ValueError(
                f"tap range must satisfy 1 <= first <= last <= 5, got "
                f"{self.tap_first}..{self.tap_last}"
            )
        if self.pd < 1 or self.mn < 1 or self.num_classes < 1:
            raise ValueError("pd, mn and num_classes must be positive")
        if self.lambda_base < 0 or not (0 < self.lambda_decay <= 1):
            raise ValueError("lambda_base must be >= 0 and lambda_decay in (0, 1]")

    @property
    def num_taps(self) -> int:
        return self.tap_last - self.tap_first + 1


@dataclass
class FusionOutputs:
    projected_rgb: List[Tensor]    # one (N, pd) tensor per tap
    projected_depth: List[Tensor]  # one (N, pd) tensor per tap
    fused_sequence: List[Tensor]   # one (N, 2*pd) tensor per tap
    logits: Tensor                 # (N, num_classes)
    probabilities: Tensor          # (N, num_classes), rows sum to 1
    fused_state: Tensor            # (N, mn) final recurrent state


def lambda_schedule(config: ModelConfig) -> List[float]:
    """Per-tap orthogonality weights: geometric decay, zero above the cutoff stage."""
    out = []
    for stage in range(config.tap_first, config.tap_last + 1):
        if stage <= config.lambda_zero_above:
            out.append(config.lambda_base * config.lambda_decay ** (stage - config.tap_first))
        else:
            out.append(0.0)
    return out


# ---------------------------------------------------------------------------
# projection blocks

@dataclass
class ProjectionBlock:
    """7x7 conv (same padding) -> ReLU -> 1x1 conv -> ReLU -> global max pool."""

    conv_spatial: ConvUnit  # pd filters of size 7x7
    conv_depthwise_mix: ConvUnit  # pd filters of size 1x1

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from self.conv_spatial.named_parameters(f"{prefix}conv7.")
        yield from self.conv_depthwise_mix.named_parameters(f"{prefix}conv1.")


def projection_block_init(in_channels: int, pd: int, seed, dtype=np.float64) -> ProjectionBlock:
    ss = np.random.SeedSequence(seed) if isinstance(seed, int) else seed
    s1, s2 = ss.spawn(2)
    return ProjectionBlock(
        conv_spatial=_conv_init(in_channels, pd, 7, s1, dtype),
        conv_depthwise_mix=_conv_init(pd, pd, 1, s2, dtype),
    )


def projection_block_forward(block: ProjectionBlock, f_i: Tensor) -> Tensor:
    """Project a tap's feature map to a (N, pd) vector in the common space."""
    from .tensor import global_max_pool

    out = conv2d(f_i, block.conv_spatial.weight, block.conv_spatial.bias, stride=1, padding=3)
    out = relu(out)
    out = conv2d(out, block.conv_depthwise_mix.weight, block.conv_depthwise_mix.bias,
                 stride=1, padding=0)
    out = relu(out)
    return global_max_pool(out)


def concat_modalities(p_rgb: Tensor, p_d: Tensor) -> Tensor:
    """RGB half first, depth half second; slicing at pd recovers the inputs."""
    if p_rgb.shape != p_d.shape:
        raise ShapeError(f"concat_modalities: shapes differ, {p_rgb.shape} vs {p_d.shape}")
    return concat([p_rgb, p_d], axis=1)


# ---------------------------------------------------------------------------
# the assembled model

@dataclass
class FusionModel:
    config: ModelConfig
    rgb_backbone: Backbone
    depth_backbone: Backbone
    proj_rgb: List[ProjectionBlock]
    proj_depth: List[ProjectionBlock]
    gru: GruParams
    classifier: LinearParams
    dtype: np.dtype

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from self.rgb_backbone.named_parameters(f"{prefix}rgb.")
        yield from self.depth_backbone.named_parameters(f"{prefix}depth.")
        for i, block in enumerate(self.proj_rgb):
            yield from block.named_parameters(f"{prefix}proj_rgb{i}.")
        for i, block in enumerate(self.proj_depth):
            yield from block.named_parameters(f"{prefix}proj_depth{i}.")
        yield from self.gru.named_parameters(f"{prefix}gru.")
        yield from self.classifier.named_parameters(f"{prefix}classifier.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from self.rgb_backbone.named_buffers(f"{prefix}rgb.")
        yield from self.depth_backbone.named_buffers(f"{prefix}depth.")

    def named_state(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        """Parameters plus batch-norm running statistics, checkpoint order."""
        yield from self.named_parameters(prefix)
        yield from self.named_buffers(prefix)

    def batch_norms(self):
        yield from self.rgb_backbone.batch_norms()
        yield from self.depth_backbone.batch_norms()

    def forward(self, rgb: Tensor, depth_colorized: Tensor, training: bool = False,
                modality: str = "both") -> FusionOutputs:
        return fusion_forward(self, rgb, depth_colorized, training=training, modality=modality)


def build_fusion_model(config: ModelConfig, seed, dtype=np.float32) -> FusionModel:
    """Construct both streams, projections, GRU and classifier from one seed."""
    dtype = np.dtype(dtype)
    ss = np.random.SeedSequence(seed) if isinstance(seed, int) else seed
    children = iter(ss.spawn(4 + 2 * config.num_taps))
    rgb_backbone = build_backbone(config.stages, config.in_channels, next(children), dtype)
    depth_backbone = build_backbone(config.stages, config.in_channels, next(children), dtype)
    tap_channels = [config.stages[i - 1].out_channels
                    for i in range(config.tap_first, config.tap_last + 1)]
    proj_rgb = [projection_block_init(c, config.pd, next(children), dtype) for c in tap_channels]
    proj_depth = [projection_block_init(c, config.pd, next(children), dtype) for c in tap_channels]
    gru = gru_init(2 * config.pd, config.mn, next(children), dtype)
    classifier = linear_init(config.mn, config.num_classes, next(children), dtype)
    return FusionModel(config, rgb_backbone, depth_backbone, proj_rgb, proj_depth,
                       gru, classifier, dtype)


def fusion_forward(model: FusionModel, rgb: Tensor, depth_colorized: Tensor,
                   training: bool = False, modality: str = "both") -> FusionOutputs:
    """Run both streams and fuse the tapped features recurrently.

    Taps are fed to the GRU in ascending order, so the final hidden state
    sees the most abstract features last. ``modality`` of "rgb" or "depth"
    zero-masks the other stream's projections, giving the single-modality
    baselines without touching the architecture.
    """
    if modality not in ("both", "rgb", "depth"):
        raise ValueError(f"modality must be both/rgb/depth, got {modality!r}")
    if rgb.shape != depth_colorized.shape:
        raise ShapeError(
            f"fusion_forward: rgb {rgb.shape} and depth {depth_colorized.shape} must agree"
        )
    cfg = model.config
    taps_rgb, _ = model.rgb_backbone.forward(rgb, training)
    taps_depth, _ = model.depth_backbone.forward(depth_colorized, training)
    zero = Tensor(np.asarray(0.0, dtype=rgb.dtype))

    projected_rgb: List[Tensor] = []
    projected_depth: List[Tensor] = []
    fused: List[Tensor] = []
    for k, stage in enumerate(range(cfg.tap_first, cfg.tap_last + 1)):
        p_rgb = projection_block_forward(model.proj_rgb[k], taps_rgb[stage - 1])
        p_d = projection_block_forward(model.proj_depth[k], taps_depth[stage - 1])
        if modality == "rgb":
            p_d = mul(p_d, zero)
        elif modality == "depth":
            p_rgb = mul(p_rgb, zero)
        projected_rgb.append(p_rgb)
        projected_depth.append(p_d)
        fused.append(concat_modalities(p_rgb, p_d))

    n = rgb.shape[0]
    h0 = Tensor(np.zeros((n, cfg.mn), dtype=rgb.dtype))
    state = gru_sequence(model.gru, fused, h0)
    logits = linear_forward(model.classifier, state)
    probabilities = softmax(logits)
    return FusionOutputs(projected_rgb, projected_depth, fused, logits, probabilities, state)


# ---------------------------------------------------------------------------
# losses

def _one_hot(labels: Sequence[int], num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError(f"labels must be a flat list, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"label out of range: values span [{labels.min()}, {labels.max()}] "
            f"but num_classes is {num_classes}"
        )
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


def classification_loss(probabilities: Tensor, labels: Sequence[int]) -> Tensor:
    """Batch mean of -log(probability of the true class).

    When ``probabilities`` was produced by :func:`softmax`, the computation
    is rerouted through the recorded logits as a fused log-softmax, which is
    stable for extreme logits. Hand-built probability tensors fall back to a
    direct log.
    """
    if probabilities.ndim != 2:
        raise ShapeError(f"classification_loss expects (N, K) probabilities, got {probabilities.shape}")
    n, k = probabilities.shape
    if len(labels) != n:
        raise ValueError(f"got {len(labels)} labels for a batch of {n}")
    onehot = Tensor(_one_hot(labels, k, probabilities.dtype))

    node = probabilities.node
    if node is not None and node.op_kind == "softmax":
        logits = node.inputs[0]
        shift = Tensor(logits.data.max(axis=1, keepdims=True))
        shifted = sub(logits, shift)
        lse = log(tensor_sum(exp(shifted), axis=1))
        picked = tensor_sum(mul(shifted, onehot), axis=1)
        return tensor_mean(sub(lse, picked))
    picked = tensor_sum(mul(probabilities, onehot), axis=1)
    return tensor_mean(sub(Tensor(np.asarray(0.0, dtype=probabilities.dtype)), log(picked)))


def orthogonality_loss(projected_rgb: Sequence[Tensor], projected_depth: Sequence[Tensor],
                       lambdas: Sequence[float]) -> Tensor:
    """Weighted squared Frobenius norm of the per-tap cross-Gram matrices.

    Each term is ||P_rgb^T P_d||_F^2 / N where rows of P are the batch's
    projected features; the batch-size division keeps the weights meaningful
    across batch sizes. Taps with a zero weight are skipped outright.
    """
    if not (len(projected_rgb) == len(projected_depth) == len(lambdas)):
        raise ValueError(
            f"orthogonality_loss: got {len(projected_rgb)} rgb, {len(projected_depth)} depth, "
            f"{len(lambdas)} lambdas"
        )
    total: Optional[Tensor] = None
    dtype = projected_rgb[0].dtype if projected_rgb else np.float64
    for p_rgb, p_d, lam in zip(projected_rgb, projected_depth, lambdas):
        if lam == 0.0:
            continue
        if p_rgb.shape != p_d.shape:
            raise ShapeError(f"paired features differ: {p_rgb.shape} vs {p_d.shape}")
        gram = matmul(transpose(p_rgb), p_d)
        term = tensor_sum(mul(gram, gram))
        scale = Tensor(np.asarray(lam / p_rgb.shape[0], dtype=p_rgb.dtype))
        term = mul(term, scale)
        total = term if total is None else add(total, term)
    if total is None:
        return Tensor(np.asarray(0.0, dtype=dtype))
    return total


def total_loss(cls: Tensor, orth: Tensor) -> Tensor:
    """Straight sum of the two objectives; the tap weights carry all weighting."""
    if not np.isfinite(cls.data).all() or not np.isfinite(orth.data).all():
        raise ValueError(
            f"total_loss: non-finite input (cls={float(cls.data)}, orth={float(orth.data)})"
        )
    return add(cls, orth)


def predict(probabilities: Tensor) -> List[int]:
    """Per-row argmax; ties resolve to the lowest class index."""
    if probabilities.ndim != 2:
        raise ShapeError(f"predict expects (N, K) probabilities, got {probabilities.shape}")
    return [int(i) for i in probabilities.data.argmax(axis=1)]
