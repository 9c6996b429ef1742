"""Image-space augmentation and spherical feature augmentation.

Pixel augmentations are pure functions of an explicit rng state: box blur,
per-channel gain, contrast stretch, flips (horizontal flipping only for
symmetric anatomy classes), then grid-aligned patch masking. Slerp interpolates
two unit feature vectors along their great circle; it participates in gradients
so synthesized features can train the heads they feed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, l2_normalize, record_op

UNIT_TOL = 1e-6
DEGENERATE_SIN = 1e-6


@dataclass(frozen=True)
class AugmentPolicy:
    enable_blur: bool = True
    enable_color: bool = True
    enable_contrast: bool = True
    vertical_flip: bool = True
    horizontal_flip_classes: frozenset[str] = frozenset({"throat", "vc-open", "vc-closed"})
    mask_patch: int = 16
    mask_fraction: float = 0.10
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_fraction < 1.0:
            raise ConfigError(f"mask_fraction must be in (0, 1), got {self.mask_fraction}")
        object.__setattr__(self, "horizontal_flip_classes",
                           frozenset(self.horizontal_flip_classes))


@dataclass
class LabeledFeature:
    """A unit-norm joint-space embedding with its class label."""

    embedding: Tensor
    class_id: int

    def __post_init__(self):
        norm = np.linalg.norm(self.embedding.data)
        if abs(norm - 1.0) > 1e-9:
            raise ContractError(f"feature norm {norm} is not 1 within 1e-9")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy:dy + img.shape[1], dx:dx + img.shape[2]]
    return out / 9.0


def patch_mask(image, patch: int, fraction: float, draw: np.random.Generator):
    """Zero round(fraction * grid) distinct grid-aligned patches."""
    pixels = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    side = pixels.shape[1]
    if side % patch != 0:
        raise ConfigError(f"image side {side} not divisible by mask patch {patch}")
    grid = side // patch
    count = _round_half_up(fraction * grid * grid)
    out = pixels.copy()
    if count > 0:
        chosen = draw.choice(grid * grid, size=count, replace=False)
        for idx in sorted(chosen):
            gy, gx = divmod(int(idx), grid)
            out[:, gy * patch:(gy + 1) * patch, gx * patch:(gx + 1) * patch] = 0.0
    return Tensor(out) if isinstance(image, Tensor) else out


def augment_image(image, class_name: str, policy: AugmentPolicy,
                  draw: np.random.Generator):
    """Randomized pixel augmentation; deterministic given the rng state."""
    pixels = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    out = pixels.copy()
    if policy.enable_blur and draw.random() < 0.5:
        out = _box_blur(out)
    if policy.enable_color and draw.random() < 0.5:
        gains = draw.uniform(0.8, 1.2, size=out.shape[0])
        out = np.clip(out * gains[:, None, None], 0.0, 1.0)
    if policy.enable_contrast and draw.random() < 0.5:
        factor = draw.uniform(0.8, 1.2)
        out = np.clip(out.mean() + factor * (out - out.mean()), 0.0, 1.0)
    if policy.vertical_flip and draw.random() < 0.5:
        out = out[:, ::-1, :].copy()
    if class_name in policy.horizontal_flip_classes and draw.random() < 0.5:
        out = out[:, :, ::-1].copy()
    out = patch_mask(out, policy.mask_patch, policy.mask_fraction, draw)
    return Tensor(out) if isinstance(image, Tensor) else out


def _check_unit(name: str, v: np.ndarray) -> None:
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > UNIT_TOL:
        raise ContractError(f"{name} must be unit-norm, got norm {norm}")


def slerp(f1, f2, lam: float) -> Tensor:
    """Interpolate two unit vectors along their great circle; unit output.

    Near-parallel inputs fall back to linear interpolation; either way the
    result is renormalized. Differentiable in both endpoints.
    """
    f1 = f1 if isinstance(f1, Tensor) else Tensor(f1)
    f2 = f2 if isinstance(f2, Tensor) else Tensor(f2)
    if f1.shape != f2.shape or f1.data.ndim != 1:
        raise ContractError(f"slerp needs two equal-length vectors, got {f1.shape}/{f2.shape}")
    _check_unit("f1", f1.data)
    _check_unit("f2", f2.data)
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must be in [0, 1], got {lam}")
    return l2_normalize(_slerp_core(f1, f2, float(lam)))


def _slerp_core(f1: Tensor, f2: Tensor, lam: float) -> Tensor:
    d1, d2 = f1.data, f2.data
    cosine = float(np.clip(np.dot(d1, d2), -1.0, 1.0))
    theta = math.acos(cosine)
    sin_t = math.sin(theta)
    if sin_t < DEGENERATE_SIN:
        out = (1.0 - lam) * d1 + lam * d2

        def bw(g):
            return (1.0 - lam) * g, lam * g

        return record_op(out, (f1, f2), bw)

    a = math.sin((1.0 - lam) * theta) / sin_t
    b = math.sin(lam * theta) / sin_t
    out = a * d1 + b * d2
    # d(a)/d(theta), d(b)/d(theta) for the chain through theta = arccos(f1.f2)
    da = ((1.0 - lam) * math.cos((1.0 - lam) * theta) * sin_t
          - math.sin((1.0 - lam) * theta) * math.cos(theta)) / (sin_t * sin_t)
    db = (lam * math.cos(lam * theta) * sin_t
          - math.sin(lam * theta) * math.cos(theta)) / (sin_t * sin_t)
    dtheta_dcos = -1.0 / math.sqrt(max(1.0 - cosine * cosine, 1e-300))

    def bw(g):
        through_theta = float(g @ (da * d1 + db * d2)) * dtheta_dcos
        return a * g + through_theta * d2, b * g + through_theta * d1

    return record_op(out, (f1, f2), bw)


def sample_slerp_batch(features: list[LabeledFeature], draw: np.random.Generator,
                       count: int) -> list[LabeledFeature]:
    """Interpolate uniformly drawn same-class pairs; empty when no class has two members."""
    pairs = []
    by_class: dict[int, list[int]] = {}
    for i, feat in enumerate(features):
        by_class.setdefault(feat.class_id, []).append(i)
    for members in by_class.values():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                pairs.append((members[a], members[b]))
    if not pairs:
        warnings.warn("no class has two members; slerp augmentation produced nothing")
        return []
    out = []
    for _ in range(count):
        i, j = pairs[int(draw.integers(len(pairs)))]
        lam = float(draw.random())
        mixed = slerp(features[i].embedding, features[j].embedding, lam)
        out.append(LabeledFeature(embedding=mixed, class_id=features[i].class_id))
    return out
