"""AdamW with decoupled weight decay.

Decay multiplies each parameter by (1 - lr * wd) before the moment update, so
regularization never flows through the adaptive scaling. Frozen tensors are
never touched; a trainable tensor arriving without a gradient is a caller bug.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor

EPS = 1e-8


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(named_params: list[tuple[str, Tensor]], state: AdamWState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999),
               weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update over the named parameters."""
    b1, b2 = betas
    state.t += 1
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, p in named_params:
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad
        if weight_decay != 0.0:
            p.data *= 1.0 - lr * weight_decay
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + EPS)
