"""Finite-difference verification of analytic gradients.

Central differences in float64 are the independent oracle used throughout
the test suite: (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate, compared
against the gradient produced by the tape.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Tuple

import numpy as np

from .tensor import Tensor, backward

__all__ = ["finite_difference_check", "parameter_gradient_errors"]


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient of f at x and central differences.

    ``f`` must be pure and deterministic and return a scalar tensor; ``x``
    must be float64, since float32 central differences drown in rounding noise.
    """
    if x.dtype != np.float64:
        raise ValueError(f"finite_difference_check requires a float64 input, got {x.dtype.name}")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.ndim != 0:
        raise ValueError(f"f must return a scalar tensor, got shape {out.shape}")
    backward(out)
    analytic = leaf.grad.data.copy()

    numeric = np.empty_like(analytic)
    base = x.data.copy()
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(base)).data)
        flat[i] = orig - step
        fm = float(f(Tensor(base)).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * step)
    return _relative_error(analytic, numeric)


def parameter_gradient_errors(
    loss_fn: Callable[[], Tensor],
    named_params: Iterable[Tuple[str, Tensor]],
    step: float = 1e-5,
) -> Dict[str, float]:
    """Finite-difference check of a loss against every named parameter tensor.

    ``loss_fn`` recomputes the loss from the current parameter values; each
    parameter is perturbed coordinate by coordinate in place and restored.
    Returns the max relative error per parameter name.
    """
    params = list(named_params)
    for name, p in params:
        if p.dtype != np.float64:
            raise ValueError(f"parameter {name} must be float64 for gradient checking")
        p.grad = None

    loss = loss_fn()
    backward(loss)

    errors: Dict[str, float] = {}
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"parameter {name} received no gradient")
        analytic = p.grad.data.copy()
        numeric = np.empty_like(analytic)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn().data)
            flat[i] = orig - step
            fm = float(loss_fn().data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)
        errors[name] = _relative_error(analytic, numeric)
        p.grad = None
    return errors
