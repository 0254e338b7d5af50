"""Optimizers and multi-start initialization.

RMSprop with momentum (weight decay folded into the gradient, momentum on
the preconditioned step), plain SGD, a per-tensor max-norm projection, and
the pick-the-best-after-one-epoch multi-start procedure. Parameter updates
mutate tensor data in place; an optimizer must be the sole owner of its
parameters while training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple, TypeVar

import numpy as np

from .tensor import Tensor, ShapeError

__all__ = [
    "RmspropState",
    "MaxNormConfig",
    "sgd_step",
    "rmsprop_init",
    "rmsprop_step",
    "max_norm_constraint",
    "multi_start_init",
    "Rmsprop",
]


@dataclass
class RmspropState:
    square_avg: Tensor
    momentum_buf: Tensor
    learning_rate: float = 1e-3
    alpha: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 2e-4
    eps: float = 1e-8


@dataclass
class MaxNormConfig:
    max_norm: float = 4.0

    def __post_init__(self):
        if self.max_norm <= 0:
            raise ValueError(f"max_norm must be positive, got {self.max_norm}")


def _check_shapes(param: Tensor, grad: Tensor) -> None:
    if param.shape != grad.shape:
        raise ShapeError(f"parameter {param.shape} and gradient {grad.shape} differ")


def sgd_step(param: Tensor, grad: Tensor, learning_rate: float) -> Tensor:
    _check_shapes(param, grad)
    param.data -= learning_rate * grad.data
    return param


def rmsprop_init(param: Tensor, learning_rate: float = 1e-3, alpha: float = 0.9,
                 momentum: float = 0.9, weight_decay: float = 2e-4,
                 eps: float = 1e-8) -> RmspropState:
    zeros = lambda: Tensor(np.zeros(param.shape, dtype=param.dtype))
    return RmspropState(zeros(), zeros(), learning_rate, alpha, momentum, weight_decay, eps)


def rmsprop_step(state: RmspropState, param: Tensor, grad: Tensor) -> Tuple[Tensor, RmspropState]:
    """g = grad + wd*param; v = a*v + (1-a)*g^2; m = mu*m + g/(sqrt(v)+eps); p -= lr*m."""
    _check_shapes(param, grad)
    _check_shapes(param, state.square_avg)
    g = grad.data + state.weight_decay * param.data
    state.square_avg.data[...] = state.alpha * state.square_avg.data + (1 - state.alpha) * g * g
    state.momentum_buf.data[...] = (
        state.momentum * state.momentum_buf.data
        + g / (np.sqrt(state.square_avg.data) + state.eps)
    )
    param.data -= state.learning_rate * state.momentum_buf.data
    return param, state


def max_norm_constraint(param: Tensor, config: MaxNormConfig) -> Tensor:
    """Project the whole tensor onto the L2 ball of radius max_norm."""
    norm = float(np.sqrt(np.sum(param.data.astype(np.float64) ** 2)))
    if norm > config.max_norm:
        param.data *= param.dtype.type(config.max_norm / norm)
    return param


ModelT = TypeVar("ModelT")


def multi_start_init(
    model_factory: Callable[[int], ModelT],
    num_starts: int,
    train_one_epoch: Callable[[ModelT], None],
    score: Callable[[ModelT], float],
    base_seed: int = 0,
) -> ModelT:
    """Build num_starts seeded candidates, train each one epoch, keep the best.

    Seeds are base_seed .. base_seed + num_starts - 1; ties go to the lowest
    seed (strictly-better scores replace the incumbent).
    """
    if num_starts < 1:
        raise ValueError(f"num_starts must be >= 1, got {num_starts}")
    best: Optional[ModelT] = None
    best_score = -np.inf
    for k in range(num_starts):
        candidate = model_factory(base_seed + k)
        train_one_epoch(candidate)
        s = float(score(candidate))
        if best is None or s > best_score:
            best = candidate
            best_score = s
    return best


class Rmsprop:
    """Convenience wrapper stepping a whole named-parameter set."""

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], learning_rate: float = 1e-3,
                 alpha: float = 0.9, momentum: float = 0.9, weight_decay: float = 2e-4,
                 eps: float = 1e-8, max_norm: Optional[float] = 4.0):
        self.params: List[Tuple[str, Tensor]] = list(named_params)
        self.states: Dict[str, RmspropState] = {
            name: rmsprop_init(p, learning_rate, alpha, momentum, weight_decay, eps)
            for name, p in self.params
        }
        self.max_norm = MaxNormConfig(max_norm) if max_norm is not None else None

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            rmsprop_step(self.states[name], p, p.grad)
            if self.max_norm is not None:
                max_norm_constraint(p, self.max_norm)

    def state_tensors(self) -> List[Tuple[str, Tensor]]:
        out = []
        for name, _ in self.params:
            st = self.states[name]
            out.append((f"{name}.square_avg", st.square_avg))
            out.append((f"{name}.momentum_buf", st.momentum_buf))
        return out

    def load_state_tensors(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, t in self.state_tensors():
            if name not in arrays:
                raise ValueError(f"optimizer state missing tensor {name}")
            if arrays[name].shape != t.shape:
                raise ValueError(f"optimizer state {name} shape mismatch")
            t.data[...] = arrays[name]
