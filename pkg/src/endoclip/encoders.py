"""Image and text encoders.

The image side is a pre-norm ViT that records its CLS token after every block,
so downstream fusion can mix early/mid/late representations. The attention
q/k/v projections are frozen at construction (they stand in for a pretrained
backbone and adapt only through injected low-rank adapters); everything else
in the tower trains.

The text side is a small frozen transformer over a word-level vocabulary,
deterministically generated from a seed. It pools the BOS position, projects
to the joint dimension, and L2-normalizes.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError
from .lora import LoraAdapter, adapter_parameters, lora_apply
from .tensor import (
    Tensor,
    add,
    add_bias,
    col_slice,
    concat_cols,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    row,
    row_softmax,
    scale,
    transpose,
)

CONTEXT_LENGTH = 32
PAD_ID, BOS_ID, UNK_ID = 0, 1, 2
BOS_POSITION = 0
RESERVED_TOKENS = ("<pad>", "<bos>", "<unk>")

_WORD_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    d_model: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    joint_dim: int = 32
    channels: int = 3
    mlp_ratio: int = 4
    text_blocks: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class EncoderOutput:
    """Per-block CLS vectors plus the final token matrix."""

    cls_per_layer: list[Tensor]
    final_tokens: Tensor


def _trainable(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class MultiHeadAttention:
    """Scaled dot-product attention over H heads; no positional content inside."""

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator,
                 freeze_qkv: bool = True):
        if d_model % num_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        qkv_std = 1.0 / math.sqrt(d_model)
        self.wq = Tensor(rng.normal(0.0, qkv_std, size=(d_model, d_model)),
                         requires_grad=not freeze_qkv)
        self.wk = Tensor(rng.normal(0.0, qkv_std, size=(d_model, d_model)),
                         requires_grad=not freeze_qkv)
        self.wv = Tensor(rng.normal(0.0, qkv_std, size=(d_model, d_model)),
                         requires_grad=not freeze_qkv)
        self.wo = _trainable(rng, (d_model, d_model))
        self.q_adapter: LoraAdapter | None = None
        self.k_adapter: LoraAdapter | None = None
        self.v_adapter: LoraAdapter | None = None

    def _project(self, w: Tensor, adapter: LoraAdapter | None, x: Tensor,
                 training: bool, rng) -> Tensor:
        if adapter is None:
            return matmul(x, transpose(w))
        return lora_apply(adapter, x, training=training, rng=rng)

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        q = self._project(self.wq, self.q_adapter, x, training, rng)
        k = self._project(self.wk, self.k_adapter, x, training, rng)
        v = self._project(self.wv, self.v_adapter, x, training, rng)
        heads = []
        inv_sqrt_d = 1.0 / math.sqrt(self.head_dim)
        for h in range(self.num_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh, kh, vh = col_slice(q, lo, hi), col_slice(k, lo, hi), col_slice(v, lo, hi)
            attn = row_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_d))
            heads.append(matmul(attn, vh))
        return matmul(concat_cols(heads), transpose(self.wo))

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        params = [(f"{prefix}.wq", self.wq), (f"{prefix}.wk", self.wk),
                  (f"{prefix}.wv", self.wv), (f"{prefix}.wo", self.wo)]
        for name, adapter in (("wq", self.q_adapter), ("wk", self.k_adapter),
                              ("wv", self.v_adapter)):
            if adapter is not None:
                params.extend(adapter_parameters(adapter, f"{prefix}.{name}"))
        return params


def mha_forward(x: Tensor, attn: MultiHeadAttention, training: bool = False, rng=None) -> Tensor:
    return attn.forward(x, training=training, rng=rng)


class TransformerBlock:
    """Pre-norm block: LN -> MHA -> residual, LN -> GELU MLP -> residual."""

    def __init__(self, d_model: int, num_heads: int, mlp_ratio: int,
                 rng: np.random.Generator, freeze_qkv: bool = True):
        hidden = mlp_ratio * d_model
        self.ln1_g = Tensor(np.ones(d_model), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(d_model), requires_grad=True)
        self.attn = MultiHeadAttention(d_model, num_heads, rng, freeze_qkv=freeze_qkv)
        self.ln2_g = Tensor(np.ones(d_model), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(d_model), requires_grad=True)
        self.w1 = _trainable(rng, (hidden, d_model))
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = _trainable(rng, (d_model, hidden))
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def forward(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        attended = self.attn.forward(layer_norm(x, self.ln1_g, self.ln1_b),
                                     training=training, rng=rng)
        x = add(x, attended)
        h = gelu(add_bias(matmul(layer_norm(x, self.ln2_g, self.ln2_b),
                                 transpose(self.w1)), self.b1))
        return add(x, add_bias(matmul(h, transpose(self.w2)), self.b2))

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        params = [(f"{prefix}.ln1_g", self.ln1_g), (f"{prefix}.ln1_b", self.ln1_b)]
        params.extend(self.attn.named_parameters(f"{prefix}.attn"))
        params.extend([(f"{prefix}.ln2_g", self.ln2_g), (f"{prefix}.ln2_b", self.ln2_b),
                       (f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
                       (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)])
        return params


class PatchEmbed:
    """Linear patch projection with learned positions and a CLS token."""

    def __init__(self, config: ViTConfig, rng: np.random.Generator):
        patch_dim = config.channels * config.patch_size ** 2
        self.config = config
        self.w = _trainable(rng, (config.d_model, patch_dim))
        self.b = Tensor(np.zeros(config.d_model), requires_grad=True)
        self.pos = _trainable(rng, (config.num_patches, config.d_model))
        self.cls = _trainable(rng, (config.d_model,))

    def forward(self, image) -> Tensor:
        cfg = self.config
        pixels = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if pixels.shape != expected:
            raise ShapeError(f"image shape {pixels.shape} does not match configured {expected}")
        g, p = cfg.image_size // cfg.patch_size, cfg.patch_size
        patches = pixels.reshape(cfg.channels, g, p, g, p).transpose(1, 3, 0, 2, 4)
        patches = Tensor(patches.reshape(g * g, -1))
        tokens = add(add_bias(matmul(patches, transpose(self.w)), self.b), self.pos)
        return concat_rows([self.cls, tokens])

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b),
                (f"{prefix}.pos", self.pos), (f"{prefix}.cls", self.cls)]


class ViTImageEncoder:
    def __init__(self, config: ViTConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.patch = PatchEmbed(config, rng)
        self.blocks = [TransformerBlock(config.d_model, config.num_heads,
                                        config.mlp_ratio, rng)
                       for _ in range(config.num_blocks)]

    def forward(self, image, training: bool = False, rng=None) -> EncoderOutput:
        x = self.patch.forward(image)
        cls_per_layer = []
        for block in self.blocks:
            x = block.forward(x, training=training, rng=rng)
            cls_per_layer.append(row(x, 0))
        return EncoderOutput(cls_per_layer=cls_per_layer, final_tokens=x)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = self.patch.named_parameters("patch")
        for i, block in enumerate(self.blocks):
            params.extend(block.named_parameters(f"block{i}"))
        return params


def patch_embed(image, model: ViTImageEncoder) -> Tensor:
    return model.patch.forward(image)


def encode_image(image, model: ViTImageEncoder, training: bool = False, rng=None) -> EncoderOutput:
    return model.forward(image, training=training, rng=rng)


# ---------------------------------------------------------------------------
# text side
# ---------------------------------------------------------------------------

class Vocabulary:
    """Word-level vocabulary; ids 0-2 are reserved for PAD, BOS, UNK."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:3]) != RESERVED_TOKENS:
            raise ConfigError(f"vocabulary must start with {RESERVED_TOKENS}")
        self.tokens = list(tokens)
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        seen = sorted({w for w in words if w not in RESERVED_TOKENS})
        return cls(list(RESERVED_TOKENS) + seen)

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        words = []
        for text in texts:
            words.extend(split_words(text))
        return cls.from_words(words)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")


def split_words(text: str) -> list[str]:
    """Lowercased word pieces; hyphenated words stay whole, punctuation splits."""
    return _WORD_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """BOS-led id sequence, truncated/padded to the fixed context length."""
    ids = [vocab.ids.get(w, UNK_ID) for w in split_words(text)]
    ids = [BOS_ID] + ids[:CONTEXT_LENGTH - 1]
    ids.extend([PAD_ID] * (CONTEXT_LENGTH - len(ids)))
    return ids


def _np_layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _np_softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TextEncoder:
    """Frozen transformer over prompts; deterministic given (seed, vocabulary)."""

    def __init__(self, vocab: Vocabulary, d_model: int, joint_dim: int,
                 num_blocks: int = 2, num_heads: int = 4, seed: int = 0):
        if d_model % num_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by num_heads {num_heads}")
        self.vocab = vocab
        self.d_model = d_model
        self.joint_dim = joint_dim
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.seed = seed
        rng = np.random.default_rng(seed)
        w_std = 1.0 / math.sqrt(d_model)
        self.weights: dict[str, np.ndarray] = {
            "tok_embed": rng.normal(0.0, 0.02, size=(len(vocab), d_model)),
            "pos_embed": rng.normal(0.0, 0.02, size=(CONTEXT_LENGTH, d_model)),
        }
        for i in range(num_blocks):
            for name in ("wq", "wk", "wv", "wo"):
                self.weights[f"block{i}.{name}"] = rng.normal(0.0, w_std, size=(d_model, d_model))
            self.weights[f"block{i}.w1"] = rng.normal(0.0, w_std, size=(4 * d_model, d_model))
            self.weights[f"block{i}.w2"] = rng.normal(0.0, w_std, size=(d_model, 4 * d_model))
        self.weights["proj"] = rng.normal(0.0, w_std, size=(d_model, joint_dim))

    def _mha(self, x: np.ndarray, i: int) -> np.ndarray:
        w = self.weights
        q, k, v = x @ w[f"block{i}.wq"].T, x @ w[f"block{i}.wk"].T, x @ w[f"block{i}.wv"].T
        hd = self.d_model // self.num_heads
        outs = []
        for h in range(self.num_heads):
            lo, hi = h * hd, (h + 1) * hd
            attn = _np_softmax_rows(q[:, lo:hi] @ k[:, lo:hi].T / math.sqrt(hd))
            outs.append(attn @ v[:, lo:hi])
        return np.concatenate(outs, axis=1) @ w[f"block{i}.wo"].T

    def encode(self, prompt: str) -> np.ndarray:
        ids = tokenize(prompt, self.vocab)
        # PAD carries no content; attention runs over the BOS-led prefix only
        length = next((i for i, t in enumerate(ids) if t == PAD_ID), CONTEXT_LENGTH)
        ids = ids[:max(length, 1)]
        x = self.weights["tok_embed"][ids] + self.weights["pos_embed"][:len(ids)]
        for i in range(self.num_blocks):
            x = x + self._mha(_np_layer_norm(x), i)
            h = _np_layer_norm(x) @ self.weights[f"block{i}.w1"].T
            h = 0.5 * h * (1.0 + erf(h / math.sqrt(2.0)))
            x = x + h @ self.weights[f"block{i}.w2"].T
        pooled = x[BOS_POSITION] @ self.weights["proj"]
        return pooled / np.linalg.norm(pooled)

    def fingerprint(self) -> bytes:
        chunks = [self.weights[name].tobytes() for name in sorted(self.weights)]
        return b"".join(chunks)


def encode_text(prompt: str, enc: TextEncoder) -> Tensor:
    """Unit-norm joint-space embedding of a prompt; never participates in gradients."""
    return Tensor(enc.encode(prompt), requires_grad=False)
