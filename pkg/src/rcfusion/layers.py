"""Trainable layer primitives composed by the fusion model.

Linear and batch-norm layers, residual blocks and the five-stage tapped
backbone, the GRU cell used for recurrent fusion, dropout, and Xavier
initialization. Parameters are plain dataclasses of tensors; every layer
exposes a ``*_forward`` function so gradients flow through the shared tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    conv2d,
    div,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    sqrt,
    sub,
    tanh,
    tensor_mean,
    transpose,
)

__all__ = [
    "LinearParams",
    "BatchNormParams",
    "GruParams",
    "ResidualStageConfig",
    "ResidualBlock",
    "Backbone",
    "xavier_init",
    "linear_init",
    "linear_forward",
    "batch_norm_init",
    "batch_norm_forward",
    "residual_block_forward",
    "build_backbone",
    "gru_init",
    "gru_cell_step",
    "gru_sequence",
    "gru_param_count",
    "refresh_batch_norm_stats",
    "dropout",
]

Seed = Union[int, np.random.SeedSequence]


def _rng(seed: Seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def xavier_init(shape: Sequence[int], seed: Seed, dtype=np.float64) -> Tensor:
    """Uniform samples in [-a, a] with a = sqrt(6 / (fan_in + fan_out)).

    Fan counts use the convolution convention: shape (out, in, *spatial)
    gives fan_in = in * prod(spatial) and fan_out = out * prod(spatial).
    Deterministic for a given seed; rank must be at least 2.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) < 2:
        raise ShapeError(f"xavier_init requires rank >= 2, got shape {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    a = float(np.sqrt(6.0 / (fan_in + fan_out)))
    samples = _rng(seed).uniform(-a, a, size=shape)
    return Tensor(samples.astype(dtype), requires_grad=True)


def _zeros(shape, dtype, requires_grad=True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _ones(shape, dtype, requires_grad=True) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# linear

@dataclass
class LinearParams:
    weight: Tensor  # (out, in)
    bias: Tensor    # (out,)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}weight", self.weight
        yield f"{prefix}bias", self.bias


def linear_init(in_features: int, out_features: int, seed: Seed, dtype=np.float64) -> LinearParams:
    return LinearParams(
        weight=xavier_init((out_features, in_features), seed, dtype),
        bias=_zeros((out_features,), dtype),
    )


def linear_forward(params: LinearParams, x: Tensor) -> Tensor:
    """Affine map x @ weight.T + bias for a batch of row vectors."""
    if x.ndim != 2 or x.shape[1] != params.weight.shape[1]:
        raise ShapeError(
            f"linear_forward: input {x.shape} incompatible with weight {params.weight.shape}"
        )
    return add(matmul(x, transpose(params.weight)), params.bias)


# ---------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}gamma", self.gamma
        yield f"{prefix}beta", self.beta

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}running_mean", self.running_mean
        yield f"{prefix}running_var", self.running_var


def batch_norm_init(channels: int, dtype=np.float64, eps: float = 1e-5,
                    momentum: float = 0.1) -> BatchNormParams:
    return BatchNormParams(
        gamma=_ones((channels,), dtype),
        beta=_zeros((channels,), dtype),
        running_mean=_zeros((channels,), dtype, requires_grad=False),
        running_var=_ones((channels,), dtype, requires_grad=False),
        eps=eps,
        momentum=momentum,
    )


def batch_norm_forward(params: BatchNormParams, x: Tensor, training: bool) -> Tensor:
    """Per-channel normalization of an N x C x H x W batch.

    Training mode normalizes by batch statistics (biased variance) and
    updates the running estimates by exponential moving average; inference
    normalizes by the running estimates.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm_forward expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if c != params.gamma.shape[0]:
        raise ShapeError(f"batch_norm_forward: {c} channels vs {params.gamma.shape[0]} parameters")
    gamma = reshape(params.gamma, (1, c, 1, 1))
    beta = reshape(params.beta, (1, c, 1, 1))
    if training:
        if n * h * w < 2:
            raise ValueError(
                f"batch_norm_forward: degenerate batch, need N*H*W >= 2, got {n * h * w}"
            )
        mean = tensor_mean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, mean)
        var = tensor_mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
        inv = div(centered, sqrt(add(var, Tensor(np.asarray(params.eps, dtype=x.dtype)))))
        m = params.momentum
        params.running_mean.data[...] = (1 - m) * params.running_mean.data + m * mean.data.reshape(c)
        params.running_var.data[...] = (1 - m) * params.running_var.data + m * var.data.reshape(c)
    else:
        rm = Tensor(params.running_mean.data.reshape(1, c, 1, 1))
        rv = Tensor(params.running_var.data.reshape(1, c, 1, 1))
        inv = div(sub(x, rm), sqrt(add(rv, Tensor(np.asarray(params.eps, dtype=x.dtype)))))
    return add(mul(inv, gamma), beta)


# ---------------------------------------------------------------------------
# residual blocks and the tapped backbone

@dataclass
class ResidualStageConfig:
    in_channels: int
    out_channels: int
    num_blocks: int = 1
    downsample_stride: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.num_blocks < 1:
            raise ValueError(f"invalid stage config: {self}")
        if self.downsample_stride not in (1, 2):
            raise ValueError(f"invalid stage config: stride must be 1 or 2, got {self.downsample_stride}")


@dataclass
class ConvUnit:
    weight: Tensor
    bias: Tensor

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}weight", self.weight
        yield f"{prefix}bias", self.bias


def _conv_init(in_ch, out_ch, k, seed, dtype) -> ConvUnit:
    return ConvUnit(weight=xavier_init((out_ch, in_ch, k, k), seed, dtype),
                    bias=_zeros((out_ch,), dtype))


@dataclass
class ResidualBlock:
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN, plus shortcut, then ReLU."""

    conv1: ConvUnit
    bn1: BatchNormParams
    conv2: ConvUnit
    bn2: BatchNormParams
    stride: int
    shortcut: Optional[ConvUnit]  # None means identity

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from self.conv1.named_parameters(f"{prefix}conv1.")
        yield from self.bn1.named_parameters(f"{prefix}bn1.")
        yield from self.conv2.named_parameters(f"{prefix}conv2.")
        yield from self.bn2.named_parameters(f"{prefix}bn2.")
        if self.shortcut is not None:
            yield from self.shortcut.named_parameters(f"{prefix}shortcut.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from self.bn1.named_buffers(f"{prefix}bn1.")
        yield from self.bn2.named_buffers(f"{prefix}bn2.")


def residual_block_init(in_ch: int, out_ch: int, stride: int, seed: Seed,
                        dtype=np.float64) -> ResidualBlock:
    ss = np.random.SeedSequence(seed) if isinstance(seed, int) else seed
    s1, s2, s3 = ss.spawn(3)
    shortcut = None
    if stride != 1 or in_ch != out_ch:
        shortcut = _conv_init(in_ch, out_ch, 1, s3, dtype)
    return ResidualBlock(
        conv1=_conv_init(in_ch, out_ch, 3, s1, dtype),
        bn1=batch_norm_init(out_ch, dtype),
        conv2=_conv_init(out_ch, out_ch, 3, s2, dtype),
        bn2=batch_norm_init(out_ch, dtype),
        stride=stride,
        shortcut=shortcut,
    )


def residual_block_forward(block: ResidualBlock, x: Tensor, training: bool = False) -> Tensor:
    out = conv2d(x, block.conv1.weight, block.conv1.bias, stride=block.stride, padding=1)
    out = relu(batch_norm_forward(block.bn1, out, training))
    out = conv2d(out, block.conv2.weight, block.conv2.bias, stride=1, padding=1)
    out = batch_norm_forward(block.bn2, out, training)
    if block.shortcut is None:
        skip = x
    else:
        skip = conv2d(x, block.shortcut.weight, block.shortcut.bias,
                      stride=block.stride, padding=0)
    if skip.shape != out.shape:
        raise ShapeError(f"residual branches disagree: {out.shape} vs {skip.shape}")
    return relu(add(out, skip))


@dataclass
class Backbone:
    """Five-stage convolutional stream exposing one tap per stage.

    Stage 1 is the stem (conv3x3 -> BN -> ReLU); stages 2..5 are residual.
    ``forward`` returns the five post-activation taps plus the terminal
    output, which at this scale is the last tap itself.
    """

    stem: ConvUnit
    stem_bn: BatchNormParams
    stem_stride: int
    stages: List[List[ResidualBlock]] = field(default_factory=list)

    def forward(self, x: Tensor, training: bool = False) -> Tuple[List[Tensor], Tensor]:
        taps = []
        out = conv2d(x, self.stem.weight, self.stem.bias, stride=self.stem_stride, padding=1)
        out = relu(batch_norm_forward(self.stem_bn, out, training))
        taps.append(out)
        for blocks in self.stages:
            for block in blocks:
                out = residual_block_forward(block, out, training)
            taps.append(out)
        return taps, taps[-1]

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from self.stem.named_parameters(f"{prefix}stem.")
        yield from self.stem_bn.named_parameters(f"{prefix}stem_bn.")
        for si, blocks in enumerate(self.stages, start=2):
            for bi, block in enumerate(blocks):
                yield from block.named_parameters(f"{prefix}stage{si}.block{bi}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        yield from self.stem_bn.named_buffers(f"{prefix}stem_bn.")
        for si, blocks in enumerate(self.stages, start=2):
            for bi, block in enumerate(blocks):
                yield from block.named_buffers(f"{prefix}stage{si}.block{bi}.")

    def batch_norms(self) -> Iterator[BatchNormParams]:
        yield self.stem_bn
        for blocks in self.stages:
            for block in blocks:
                yield block.bn1
                yield block.bn2


def build_backbone(config: Sequence[ResidualStageConfig], in_channels: int, seed: Seed,
                   dtype=np.float64) -> Backbone:
    """Assemble a five-tap backbone from five stage configs.

    The first config describes the stem (its num_blocks must be 1); each
    later stage chains num_blocks residual blocks, downsampling in the
    first block only. Channel counts must chain consistently.
    """
    config = list(config)
    if len(config) != 5:
        raise ValueError(f"build_backbone requires exactly 5 stage configs, got {len(config)}")
    if config[0].in_channels != in_channels:
        raise ValueError(
            f"invalid stage config: stem expects {config[0].in_channels} input channels, "
            f"backbone input has {in_channels}"
        )
    if config[0].num_blocks != 1:
        raise ValueError("invalid stage config: the stem stage must have num_blocks=1")
    for prev, cur in zip(config, config[1:]):
        if cur.in_channels != prev.out_channels:
            raise ValueError(
                f"invalid stage config: stage input {cur.in_channels} != previous output "
                f"{prev.out_channels}"
            )
    ss = np.random.SeedSequence(seed) if isinstance(seed, int) else seed
    seeds = iter(ss.spawn(1 + sum(c.num_blocks for c in config[1:])))
    backbone = Backbone(
        stem=_conv_init(in_channels, config[0].out_channels, 3, next(seeds), dtype),
        stem_bn=batch_norm_init(config[0].out_channels, dtype),
        stem_stride=config[0].downsample_stride,
    )
    for stage_cfg in config[1:]:
        blocks = []
        in_ch = stage_cfg.in_channels
        for b in range(stage_cfg.num_blocks):
            stride = stage_cfg.downsample_stride if b == 0 else 1
            blocks.append(residual_block_init(in_ch, stage_cfg.out_channels, stride,
                                              next(seeds), dtype))
            in_ch = stage_cfg.out_channels
        backbone.stages.append(blocks)
    return backbone


def backbone_parameter_count(backbone: Backbone) -> int:
    return sum(int(t.size) for _, t in backbone.named_parameters())


# ---------------------------------------------------------------------------
# GRU

@dataclass
class GruParams:
    """Gate weights for a single recurrent fusion layer.

    Per gate g in {update z, reset r, candidate h}: input weight w_g of
    shape (mn, in), recurrent weight u_g of shape (mn, mn), bias b_g of
    shape (mn,).
    """

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for gate in ("z", "r", "h"):
            yield f"{prefix}w_{gate}", getattr(self, f"w_{gate}")
            yield f"{prefix}u_{gate}", getattr(self, f"u_{gate}")
            yield f"{prefix}b_{gate}", getattr(self, f"b_{gate}")

    @property
    def hidden_size(self) -> int:
        return self.w_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_z.shape[1]


def gru_init(input_size: int, hidden_size: int, seed: Seed, dtype=np.float64) -> GruParams:
    ss = np.random.SeedSequence(seed) if isinstance(seed, int) else seed
    seeds = iter(ss.spawn(6))
    kw = {}
    for gate in ("z", "r", "h"):
        kw[f"w_{gate}"] = xavier_init((hidden_size, input_size), next(seeds), dtype)
        kw[f"u_{gate}"] = xavier_init((hidden_size, hidden_size), next(seeds), dtype)
        kw[f"b_{gate}"] = _zeros((hidden_size,), dtype)
    return GruParams(**kw)


def gru_param_count(input_size: int, hidden_size: int) -> int:
    return 3 * (hidden_size * input_size + hidden_size * hidden_size + hidden_size)


def gru_cell_step(params: GruParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One gated update.

    z = sigmoid(x W_z^T + h U_z^T + b_z)
    r = sigmoid(x W_r^T + h U_r^T + b_r)
    hc = tanh(x W_h^T + (r * h) U_h^T + b_h)
    h_new = (1 - z) * h + z * hc
    """
    if x_t.ndim != 2 or h_prev.ndim != 2:
        raise ShapeError(f"gru_cell_step expects 2-d inputs, got {x_t.shape} and {h_prev.shape}")
    if x_t.shape[1] != params.input_size or h_prev.shape[1] != params.hidden_size:
        raise ShapeError(
            f"gru_cell_step: x {x_t.shape}, h {h_prev.shape} incompatible with gates "
            f"(in={params.input_size}, mn={params.hidden_size})"
        )
    z = sigmoid(add(add(matmul(x_t, transpose(params.w_z)),
                        matmul(h_prev, transpose(params.u_z))), params.b_z))
    r = sigmoid(add(add(matmul(x_t, transpose(params.w_r)),
                        matmul(h_prev, transpose(params.u_r))), params.b_r))
    hc = tanh(add(add(matmul(x_t, transpose(params.w_h)),
                      matmul(mul(r, h_prev), transpose(params.u_h))), params.b_h))
    one = Tensor(np.asarray(1.0, dtype=x_t.dtype))
    return add(mul(sub(one, z), h_prev), mul(z, hc))


def gru_sequence(params: GruParams, sequence: Sequence[Tensor], h0: Tensor) -> Tensor:
    """Fold the cell over a sequence; returns the final hidden state.

    Backpropagation through time falls out of the recorded tape.
    """
    sequence = list(sequence)
    if not sequence:
        raise ValueError("gru_sequence requires a nonempty sequence")
    first = sequence[0]
    for x_t in sequence[1:]:
        if x_t.shape != first.shape:
            raise ShapeError(f"gru_sequence: mixed step shapes {first.shape} and {x_t.shape}")
    h = h0
    for x_t in sequence:
        h = gru_cell_step(params, x_t, h)
    return h


def refresh_batch_norm_stats(batch_norms: Sequence[BatchNormParams], forward) -> None:
    """Recompute running statistics exactly at the current weights.

    The preconditioned optimizer keeps parameters moving even at tiny
    gradients, so EMA estimates describe a slightly stale network; with few
    batches per epoch the compounding across layers can wreck inference-mode
    outputs. Setting momentum to 1 for one full-set training-mode forward
    replaces every running estimate with the exact current statistics.
    """
    saved = [bn.momentum for bn in batch_norms]
    try:
        for bn in batch_norms:
            bn.momentum = 1.0
        forward()
    finally:
        for bn, m in zip(batch_norms, saved):
            bn.momentum = m


# ---------------------------------------------------------------------------
# dropout

def dropout(x: Tensor, phi: float, training: bool, seed: Seed) -> Tensor:
    """Zero elements with probability phi during training.

    Inference multiplies by the kept probability (1 - phi) instead of
    rescaling at train time; with phi = 0 both modes return x unchanged.
    """
    if not 0.0 <= phi < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {phi}")
    one = Tensor(np.asarray(1.0, dtype=x.dtype))
    if phi == 0.0:
        return mul(x, one)
    if not training:
        return mul(x, Tensor(np.asarray(1.0 - phi, dtype=x.dtype)))
    mask = (_rng(seed).random(x.shape) >= phi).astype(x.dtype)
    return mul(x, Tensor(mask))
