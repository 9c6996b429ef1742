"""Multi-level feature aggregation.

Selected per-block CLS vectors are stacked behind a learnable fusion token and
run through a small transformer with no positional embeddings, so the fused
output is invariant to the order of its source tokens. Position 0 is then
projected to the joint dimension and L2-normalized; this vector is the image
embedding used by both the losses and retrieval.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .encoders import TransformerBlock
from .errors import ConfigError
from .tensor import Tensor, concat_rows, l2_normalize, matmul, row, transpose

# The fused, projected, unit-norm image embedding.
FusedEmbedding = Tensor


@dataclass(frozen=True)
class FusionConfig:
    selected_layers: Optional[tuple[int, ...]] = None  # 1-based block indices
    num_selected: int = 3  # K for the default spacing policy
    fusion_blocks: int = 1
    fusion_heads: int = 4

    def __post_init__(self):
        if self.selected_layers is not None:
            layers = tuple(self.selected_layers)
            if not layers or any(b <= a for a, b in zip(layers, layers[1:])):
                raise ConfigError(f"selected_layers must be strictly increasing, got {layers}")
            if layers[0] < 1:
                raise ConfigError(f"selected_layers are 1-based, got {layers}")
            object.__setattr__(self, "selected_layers", layers)
        if self.num_selected < 1:
            raise ConfigError(f"num_selected must be >= 1, got {self.num_selected}")


def select_layers(num_blocks: int, k: int) -> list[int]:
    """K evenly spaced 1-based block indices ending at the last block."""
    if not 1 <= k <= num_blocks:
        raise ConfigError(f"cannot select {k} of {num_blocks} blocks")
    picks = []
    for i in range(1, k + 1):
        idx = int(np.floor(i * num_blocks / k + 0.5))
        if not picks or idx > picks[-1]:
            picks.append(idx)
    return picks


class FusionModule:
    def __init__(self, d_model: int, joint_dim: int, config: FusionConfig,
                 seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.cls_fusion = Tensor(rng.normal(0.0, 0.02, size=(d_model,)), requires_grad=True)
        self.blocks = [TransformerBlock(d_model, config.fusion_heads, 4, rng,
                                        freeze_qkv=False)
                       for _ in range(config.fusion_blocks)]
        self.proj = Tensor(rng.normal(0.0, 0.02, size=(joint_dim, d_model)),
                           requires_grad=True)

    def named_parameters(self, prefix: str = "fusion") -> list[tuple[str, Tensor]]:
        params = [(f"{prefix}.cls", self.cls_fusion)]
        for i, block in enumerate(self.blocks):
            params.extend(block.named_parameters(f"{prefix}.block{i}"))
        params.append((f"{prefix}.proj", self.proj))
        return params


def fuse(per_layer_cls: Sequence[Tensor], module: FusionModule,
         config: FusionConfig, training: bool = False, rng=None) -> FusedEmbedding:
    """Aggregate selected CLS tokens into one unit-norm joint-space vector."""
    num_layers = len(per_layer_cls)
    indices = config.selected_layers or tuple(select_layers(num_layers, config.num_selected))
    if indices[-1] > num_layers:
        raise ConfigError(
            f"selected layer {indices[-1]} exceeds available {num_layers} blocks")
    x = concat_rows([module.cls_fusion] + [per_layer_cls[i - 1] for i in indices])
    for block in module.blocks:
        x = block.forward(x, training=training, rng=rng)
    fused = concat_rows([row(x, 0)])
    projected = row(matmul(fused, transpose(module.proj)), 0)
    return l2_normalize(projected)
