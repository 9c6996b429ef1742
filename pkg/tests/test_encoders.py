"""Image tower, tokenizer, and frozen text encoder behavior."""

import math

import numpy as np
import pytest

from endoclip.encoders import (
    BOS_ID,
    CONTEXT_LENGTH,
    PAD_ID,
    UNK_ID,
    MultiHeadAttention,
    TextEncoder,
    ViTConfig,
    ViTImageEncoder,
    Vocabulary,
    encode_image,
    encode_text,
    patch_embed,
    tokenize,
)
from endoclip.errors import ConfigError, ShapeError
from endoclip.tensor import Tensor


class TestViTConfig:
    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            ViTConfig(image_size=30, patch_size=8)
        with pytest.raises(ConfigError):
            ViTConfig(d_model=30, num_heads=4)


class TestPatchEmbed:
    def test_token_count_desk_scale(self):
        model = ViTImageEncoder(ViTConfig(image_size=32, patch_size=8), seed=0)
        tokens = patch_embed(np.zeros((3, 32, 32)), model)
        assert tokens.shape == (17, 64)

    def test_token_count_full_scale(self):
        cfg = ViTConfig(image_size=224, patch_size=16, d_model=32, num_blocks=1,
                        num_heads=2, joint_dim=8)
        model = ViTImageEncoder(cfg, seed=0)
        tokens = patch_embed(np.zeros((3, 224, 224)), model)
        assert tokens.shape == (197, 32)

    def test_zero_image_zero_weights_leaves_positions(self):
        model = ViTImageEncoder(ViTConfig(image_size=32, patch_size=8), seed=0)
        model.patch.w.data[:] = 0.0
        tokens = patch_embed(np.zeros((3, 32, 32)), model)
        np.testing.assert_array_equal(tokens.data[1:], model.patch.pos.data)
        np.testing.assert_array_equal(tokens.data[0], model.patch.cls.data)

    def test_wrong_image_size_rejected(self):
        model = ViTImageEncoder(ViTConfig(image_size=32, patch_size=8), seed=0)
        with pytest.raises(ShapeError):
            patch_embed(np.zeros((3, 16, 16)), model)


class TestMultiHeadAttention:
    def test_single_token_degenerate_attention(self):
        rng = np.random.default_rng(0)
        attn = MultiHeadAttention(8, 2, rng)
        x = Tensor(rng.standard_normal((1, 8)))
        out = attn.forward(x)
        expected = (x.data @ attn.wv.data.T) @ attn.wo.data.T
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_single_head_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        attn = MultiHeadAttention(6, 1, rng)
        x = rng.standard_normal((4, 6))
        out = attn.forward(Tensor(x))
        q, k, v = x @ attn.wq.data.T, x @ attn.wk.data.T, x @ attn.wv.data.T
        scores = q @ k.T / math.sqrt(6)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        expected = (e / e.sum(axis=1, keepdims=True)) @ v @ attn.wo.data.T
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_row_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        attn = MultiHeadAttention(8, 4, rng)
        x = rng.standard_normal((5, 8))
        perm = np.array([3, 0, 4, 1, 2])
        out = attn.forward(Tensor(x)).data
        out_perm = attn.forward(Tensor(x[perm])).data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


class TestEncodeImage:
    def test_cls_count_matches_depth(self):
        cfg = ViTConfig(image_size=16, patch_size=8, d_model=16, num_blocks=4,
                        num_heads=2, joint_dim=8)
        out = encode_image(np.zeros((3, 16, 16)), ViTImageEncoder(cfg, seed=0))
        assert len(out.cls_per_layer) == 4
        assert all(c.shape == (16,) for c in out.cls_per_layer)

    def test_different_images_different_cls(self):
        cfg = ViTConfig(image_size=16, patch_size=8, d_model=16, num_blocks=2,
                        num_heads=2, joint_dim=8)
        model = ViTImageEncoder(cfg, seed=0)
        rng = np.random.default_rng(3)
        a = encode_image(rng.random((3, 16, 16)), model)
        b = encode_image(rng.random((3, 16, 16)), model)
        assert not np.allclose(a.cls_per_layer[-1].data, b.cls_per_layer[-1].data)


class TestTokenize:
    def make_vocab(self):
        return Vocabulary.from_texts(["A photo of a throat, Image description."])

    def test_empty_string(self):
        ids = tokenize("", self.make_vocab())
        assert ids == [BOS_ID] + [PAD_ID] * (CONTEXT_LENGTH - 1)

    def test_word_count(self):
        vocab = self.make_vocab()
        ids = tokenize("A photo of a throat", vocab)
        words = [i for i in ids if i not in (BOS_ID, PAD_ID)]
        assert ids[0] == BOS_ID
        assert len(words) == 5

    def test_determinism(self):
        vocab = self.make_vocab()
        assert tokenize("A photo of a throat", vocab) == tokenize("A photo of a throat", vocab)

    def test_unknown_maps_to_unk(self):
        ids = tokenize("zyzzyva", self.make_vocab())
        assert ids[1] == UNK_ID

    def test_hyphenated_class_names_stay_whole(self):
        vocab = Vocabulary.from_texts(["vc-open vc-closed nose-right"])
        ids = tokenize("vc-open", vocab)
        assert ids[1] == vocab.ids["vc-open"]
        assert ids[2] == PAD_ID

    def test_truncation_to_context_length(self):
        vocab = self.make_vocab()
        ids = tokenize("word " * 100, vocab)
        assert len(ids) == CONTEXT_LENGTH


class TestVocabulary:
    def test_reserved_prefix_required(self):
        with pytest.raises(ConfigError):
            Vocabulary(["a", "b", "c"])

    def test_file_roundtrip(self, tmp_path):
        vocab = Vocabulary.from_texts(["A photo of a vc-open, cords apart."])
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.tokens == vocab.tokens


class TestTextEncoder:
    def make_encoder(self, seed=0):
        vocab = Vocabulary.from_texts(
            ["A photo of a throat, Image description.",
             "A photo of a nose-left, Image description."])
        return TextEncoder(vocab, d_model=16, joint_dim=8, seed=seed)

    def test_unit_norm(self):
        enc = self.make_encoder()
        for text in ("", "A photo of a throat, Image description.", "unseen words here"):
            emb = encode_text(text, enc)
            np.testing.assert_allclose(np.linalg.norm(emb.data), 1.0, atol=1e-12)

    def test_distinct_prompts_not_collinear(self):
        enc = self.make_encoder()
        a = encode_text("A photo of a throat, Image description.", enc).data
        b = encode_text("A photo of a nose-left, Image description.", enc).data
        assert float(a @ b) < 1.0 - 1e-6

    def test_bitwise_determinism(self):
        enc1 = self.make_encoder(seed=11)
        enc2 = self.make_encoder(seed=11)
        text = "A photo of a throat, Image description."
        assert np.array_equal(enc1.encode(text), enc2.encode(text))
        assert enc1.fingerprint() == enc2.fingerprint()

    def test_never_requires_grad(self):
        emb = encode_text("anything", self.make_encoder())
        assert not emb.requires_grad
