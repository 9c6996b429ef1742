"""Assembly of the full multimodal model from its configured parts.

One object owns the image tower (optionally LoRA-adapted), the embedding path
(CLS fusion when enabled, otherwise a plain projection of the final CLS), the
classification head, and the frozen text encoder. All embedding paths end on
the unit sphere of the joint space.
"""

from __future__ import annotations

import numpy as np

from .config import TrainConfig
from .encoders import TextEncoder, ViTImageEncoder, Vocabulary, encode_text
from .fusion import FusionModule, fuse
from .lora import inject
from .objectives import LinearHead, NUM_CLASSES
from .tensor import Tensor, concat_rows, l2_normalize, matmul, row, transpose

# seed offsets keep the tower, adapters, fusion, head, and text streams apart
_LORA_SEED = 1000
_FUSION_SEED = 2000
_HEAD_SEED = 3000
_TEXT_SEED = 4000


class JointModel:
    def __init__(self, config: TrainConfig, vocab: Vocabulary, text_seed: int | None = None):
        vit = config.model
        self.config = config
        seed = config.seed
        self.encoder = ViTImageEncoder(vit, seed=seed)
        if config.toggles.lora:
            inject(self.encoder, config.lora, seed=seed + _LORA_SEED)
        if config.toggles.mfa:
            self.fusion: FusionModule | None = FusionModule(
                vit.d_model, vit.joint_dim, config.fusion, seed=seed + _FUSION_SEED)
            self.final_proj = None
        else:
            self.fusion = None
            rng = np.random.default_rng(seed + _FUSION_SEED)
            self.final_proj = Tensor(rng.normal(0.0, 0.02, size=(vit.joint_dim, vit.d_model)),
                                     requires_grad=True)
        self.head = LinearHead(vit.joint_dim, NUM_CLASSES, seed=seed + _HEAD_SEED)
        self.text_seed = seed + _TEXT_SEED if text_seed is None else text_seed
        self.text = TextEncoder(vocab, vit.d_model, vit.joint_dim,
                                num_blocks=vit.text_blocks, seed=self.text_seed)
        self._prompt_cache: dict[str, np.ndarray] = {}

    def embed_image(self, image, training: bool = False, rng=None) -> Tensor:
        """Unit-norm joint-space embedding of one preprocessed image."""
        out = self.encoder.forward(image, training=training, rng=rng)
        if self.fusion is not None:
            return fuse(out.cls_per_layer, self.fusion, self.config.fusion,
                        training=training, rng=rng)
        final_cls = concat_rows([out.cls_per_layer[-1]])
        projected = row(matmul(final_cls, transpose(self.final_proj)), 0)
        return l2_normalize(projected)

    def embed_text(self, prompt: str) -> np.ndarray:
        """Cached frozen text embedding (prompts repeat across epochs)."""
        cached = self._prompt_cache.get(prompt)
        if cached is None:
            cached = encode_text(prompt, self.text).data
            self._prompt_cache[prompt] = cached
        return cached

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = self.encoder.named_parameters()
        if self.fusion is not None:
            params.extend(self.fusion.named_parameters("fusion"))
        if self.final_proj is not None:
            params.append(("proj.final", self.final_proj))
        params.extend(self.head.named_parameters("head"))
        return params

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]
