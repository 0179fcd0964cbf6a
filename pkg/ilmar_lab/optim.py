"""
Parameter update rules: plain gradient descent and Adam.
"""

from dataclasses import dataclass
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from .autodiff import ParamVector, Tensor, as_tensor, mul, sub
from .exceptions import StructureError


def sgd_step(
    params: Union[ParamVector, Mapping[str, Tensor]],
    grad: Union[ParamVector, Mapping[str, Tensor]],
    lr: float,
    traced: bool = False,
) -> Union[ParamVector, Dict[str, Tensor]]:
    """
    One gradient-descent step ``params - lr * grad``.

    Args:
        params: Current parameters (ParamVector, or tensors when traced)
        grad: Gradient with the same segment structure
        lr: Learning rate (``>= 0``)
        traced: Return tensors that stay differentiable through ``grad``

    Returns:
        Updated ParamVector, or a dict of tensors when ``traced`` is set
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if list(params.keys()) != list(grad.keys()):
        raise StructureError("sgd_step: parameter and gradient segments differ",
                             {"params": list(params.keys()), "grad": list(grad.keys())})

    if traced:
        out = {}
        for name in params:
            p, g = as_tensor(params[name]), as_tensor(grad[name])
            if p.shape != g.shape:
                raise StructureError(f"sgd_step: shape mismatch in segment {name}")
            out[name] = sub(p, mul(g, lr))
        return out

    base = params if isinstance(params, ParamVector) else ParamVector(
        (n, as_tensor(t).value) for n, t in params.items())
    grads = {n: as_tensor(g).value if isinstance(g, Tensor) else np.asarray(g) for n, g in grad.items()}
    return base.combine(grads, lambda p, g: p - lr * g)


@dataclass
class AdamState:
    """First and second moment estimates plus the step counter."""
    m: ParamVector
    v: ParamVector
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ParamVector) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), step=0)


def adam_step(
    state: AdamState,
    params: ParamVector,
    grad: ParamVector,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[ParamVector, AdamState]:
    """
    One bias-corrected Adam update.

    Returns:
        Tuple of (updated params, updated optimizer state)
    """
    params.check_same_structure(grad, "params and gradient")
    params.check_same_structure(state.m, "params and Adam moments")
    step = state.step + 1
    m = state.m.combine(grad, lambda m_, g: beta1 * m_ + (1.0 - beta1) * g)
    v = state.v.combine(grad, lambda v_, g: beta2 * v_ + (1.0 - beta2) * g * g)
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step

    updated = []
    for name, p in params.items():
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2
        updated.append((name, p - lr * m_hat / (np.sqrt(v_hat) + eps)))
    return ParamVector(updated), AdamState(m=m, v=v, step=step)
