"""Low-rank adapters for frozen linear projections.

An adapter adds a trainable rank-r update to a frozen weight: the projection
x -> x.Wt becomes x.Wt + gamma * (x.At).Bt with A (r x d2) Kaiming-initialized,
B (d1 x r) zero-initialized, and gamma = alpha / r. Zero B means injection is
exactly transparent until training moves it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, add, dropout, matmul, scale, transpose


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    dropout: float = 0.1

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def gamma(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraAdapter:
    """Trainable (A, B) pair attached to a frozen base projection."""

    a: Tensor  # (r, d2), trainable
    b: Tensor  # (d1, r), trainable
    gamma: float
    base: Tensor  # (d1, d2), never receives gradient
    config: LoraConfig = field(default_factory=LoraConfig)
    seed: int = 0


def lora_init(d1: int, d2: int, config: LoraConfig, seed: int) -> LoraAdapter:
    """Fresh adapter for a frozen (d1 x d2) weight; delta starts at exactly zero."""
    if d1 < 1 or d2 < 1:
        raise ConfigError(f"dimensions must be positive, got {d1}x{d2}")
    if config.rank > min(d1, d2) // 2:
        raise ConfigError(
            f"rank {config.rank} too large for {d1}x{d2} (must be <= {min(d1, d2) // 2})")
    rng = np.random.default_rng(seed)
    bound = math.sqrt(6.0 / d2)  # Kaiming-uniform, fan-in = d2
    a = Tensor(rng.uniform(-bound, bound, size=(config.rank, d2)), requires_grad=True)
    b = Tensor(np.zeros((d1, config.rank)), requires_grad=True)
    base = Tensor(np.zeros((d1, d2)), requires_grad=False)
    return LoraAdapter(a=a, b=b, gamma=config.gamma, base=base, config=config, seed=seed)


def lora_apply(adapter: LoraAdapter, x: Tensor, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
    """x.Wt + gamma * (x.At).Bt; dropout hits only the adapter-path input."""
    d1, d2 = adapter.base.shape
    if x.data.ndim != 2 or x.shape[1] != d2:
        raise ShapeError(f"lora_apply input {x.shape} does not match base {adapter.base.shape}")
    base_out = matmul(x, transpose(adapter.base))
    adapter_in = x
    if training and adapter.config.dropout > 0.0:
        if rng is None:
            raise ContractError("training-mode lora_apply needs an rng for dropout")
        adapter_in = dropout(x, adapter.config.dropout, rng)
    down = matmul(adapter_in, transpose(adapter.a))
    up = matmul(down, transpose(adapter.b))
    return add(base_out, scale(up, adapter.gamma))


def inject(model, config: LoraConfig, seed: int):
    """Attach fresh adapters to the q, k, v projections of every encoder block.

    The wrapped base weights are frozen already; exactly 3 * num_blocks
    adapters are created. Injecting twice is an error.
    """
    blocks = model.blocks
    for block in blocks:
        attn = block.attn
        if attn.q_adapter is not None or attn.k_adapter is not None or attn.v_adapter is not None:
            raise ContractError("model already carries adapters; double injection")
    for i, block in enumerate(blocks):
        attn = block.attn
        d1, d2 = attn.wq.shape
        attn.q_adapter = _adopt_base(lora_init(d1, d2, config, seed + 3 * i + 0), attn.wq)
        attn.k_adapter = _adopt_base(lora_init(d1, d2, config, seed + 3 * i + 1), attn.wk)
        attn.v_adapter = _adopt_base(lora_init(d1, d2, config, seed + 3 * i + 2), attn.wv)
    return model


def _adopt_base(adapter: LoraAdapter, base: Tensor) -> LoraAdapter:
    if base.requires_grad:
        raise ContractError("adapter base weight must be frozen")
    adapter.base = base
    return adapter


def adapter_parameters(adapter: LoraAdapter, prefix: str) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.lora_a", adapter.a), (f"{prefix}.lora_b", adapter.b)]
