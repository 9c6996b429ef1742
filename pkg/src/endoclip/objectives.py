"""Prompt construction and the joint training objective.

The contrastive term is the symmetric InfoNCE over matched image/text pairs,
using raw dot products of unit embeddings as logits (an optional fixed
temperature divides them; default 1.0 leaves them untouched). Classification
is mean cross-entropy of a linear head over the normalized joint embedding,
so real and slerp-synthesized samples share one path. The total is the
weighted sum of the two.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, LabelError
from .tensor import (
    Tensor,
    add,
    add_bias,
    cross_entropy_mean,
    matmul,
    pairwise_dot,
    scale,
    symmetric_info_nce,
)

CLASS_NAMES = ("nose-right", "nose-left", "ear-right", "ear-left",
               "vc-open", "vc-closed", "throat")
NUM_CLASSES = len(CLASS_NAMES)
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}

PROMPT_PREFIX = "A photo of a "
DEFAULT_DESCRIPTION = "Image description"


@dataclass(frozen=True)
class LossWeights:
    mu1: float = 1.0  # classification
    mu2: float = 0.5  # contrastive

    def __post_init__(self):
        if self.mu1 < 0 or self.mu2 < 0:
            raise ConfigError(f"loss weights must be >= 0, got {self.mu1}, {self.mu2}")


class LinearHead:
    """Linear classifier over the joint embedding."""

    def __init__(self, in_dim: int, num_classes: int = NUM_CLASSES, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.w = Tensor(rng.normal(0.0, 0.02, size=(num_classes, in_dim)), requires_grad=True)
        self.b = Tensor(np.zeros(num_classes), requires_grad=True)

    def logits(self, features: Tensor) -> Tensor:
        from .tensor import transpose
        return add_bias(matmul(features, transpose(self.w)), self.b)

    def named_parameters(self, prefix: str = "head") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


def class_id(class_name: str) -> int:
    try:
        return CLASS_IDS[class_name]
    except KeyError:
        raise LabelError(f"unknown class {class_name!r}; expected one of {CLASS_NAMES}") from None


def build_prompt(class_name: str, description: Optional[str] = None) -> str:
    """Natural-language prompt naming the class, with an optional description."""
    class_id(class_name)  # validates membership
    body = description if description else DEFAULT_DESCRIPTION
    return f"{PROMPT_PREFIX}{class_name}, {body}."


def _check_unit_rows(name: str, m: np.ndarray) -> None:
    norms = np.linalg.norm(m, axis=1)
    worst = float(np.abs(norms - 1.0).max()) if norms.size else 0.0
    if worst > 1e-6:
        raise ContractError(f"{name} rows must be unit-norm; worst deviation {worst}")


def contrastive_loss(v: Tensor, u: Tensor, temperature: float = 1.0) -> Tensor:
    """Symmetric InfoNCE over matched rows of v (images) and u (texts)."""
    if v.data.ndim != 2 or v.shape != u.shape:
        raise ContractError(f"contrastive_loss needs matching N x d matrices, got {v.shape}/{u.shape}")
    if v.shape[0] == 0:
        raise ContractError("contrastive_loss over an empty batch")
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    _check_unit_rows("v", v.data)
    _check_unit_rows("u", u.data)
    scores = pairwise_dot(v, u)
    if temperature != 1.0:
        scores = scale(scores, 1.0 / temperature)
    return symmetric_info_nce(scores)


def classification_loss(features: Tensor, labels: Sequence[int], head: LinearHead) -> Tensor:
    """Mean cross-entropy of the head's logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= head.w.shape[0]):
        raise LabelError(f"labels must lie in [0, {head.w.shape[0]}), got {labels}")
    return cross_entropy_mean(head.logits(features), labels)


def total_loss(cls: Tensor, con: Tensor, weights: LossWeights) -> Tensor:
    """mu1 * classification + mu2 * contrastive."""
    return add(scale(cls, weights.mu1), scale(con, weights.mu2))
