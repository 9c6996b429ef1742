"""Adapter math: init contract, application, injection, transparency."""

import numpy as np
import pytest

from endoclip.encoders import ViTConfig, ViTImageEncoder
from endoclip.errors import ConfigError, ContractError, ShapeError
from endoclip.lora import LoraAdapter, LoraConfig, inject, lora_apply, lora_init
from endoclip.tensor import Tensor


def small_config():
    return ViTConfig(image_size=16, patch_size=8, d_model=16, num_blocks=4,
                     num_heads=2, joint_dim=8)


class TestInit:
    def test_b_starts_at_exactly_zero(self):
        adapter = lora_init(12, 10, LoraConfig(rank=3, alpha=6.0), seed=1)
        assert np.all(adapter.b.data == 0.0)

    def test_gamma_is_alpha_over_rank(self):
        adapter = lora_init(16, 16, LoraConfig(rank=4, alpha=8.0), seed=0)
        assert adapter.gamma == 2.0

    def test_same_seed_same_a(self):
        one = lora_init(16, 16, LoraConfig(rank=4), seed=7)
        two = lora_init(16, 16, LoraConfig(rank=4), seed=7)
        assert np.array_equal(one.a.data, two.a.data)

    def test_kaiming_bound(self):
        adapter = lora_init(64, 64, LoraConfig(rank=8, alpha=8.0), seed=3)
        bound = np.sqrt(6.0 / 64)
        assert np.all(np.abs(adapter.a.data) <= bound)

    def test_rank_too_large_rejected(self):
        with pytest.raises(ConfigError):
            lora_init(8, 8, LoraConfig(rank=5), seed=0)

    def test_bad_config_values(self):
        with pytest.raises(ConfigError):
            LoraConfig(rank=0)
        with pytest.raises(ConfigError):
            LoraConfig(dropout=1.0)


class TestApply:
    def test_zero_b_reduces_to_base(self):
        rng = np.random.default_rng(0)
        adapter = lora_init(6, 8, LoraConfig(rank=2), seed=0)
        adapter.base = Tensor(rng.standard_normal((6, 8)))
        x = Tensor(rng.standard_normal((3, 8)))
        out = lora_apply(adapter, x)
        np.testing.assert_array_equal(out.data, x.data @ adapter.base.data.T)

    def test_identity_composition(self):
        d = 5
        adapter = LoraAdapter(a=Tensor(np.eye(d)), b=Tensor(np.eye(d)), gamma=1.0,
                              base=Tensor(np.zeros((d, d))),
                              config=LoraConfig(rank=d, dropout=0.0))
        x = Tensor(np.random.default_rng(1).standard_normal((4, d)))
        out = lora_apply(adapter, x)
        np.testing.assert_allclose(out.data, x.data, atol=1e-15)

    def test_matches_materialized_delta(self):
        rng = np.random.default_rng(2)
        adapter = lora_init(7, 9, LoraConfig(rank=3, alpha=6.0), seed=5)
        adapter.base = Tensor(rng.standard_normal((7, 9)))
        adapter.b = Tensor(rng.standard_normal((7, 3)), requires_grad=True)
        x = Tensor(rng.standard_normal((4, 9)))
        out = lora_apply(adapter, x)
        merged = adapter.base.data + adapter.gamma * adapter.b.data @ adapter.a.data
        np.testing.assert_allclose(out.data, x.data @ merged.T, atol=1e-12)

    def test_doubling_alpha_doubles_adapter_path(self):
        rng = np.random.default_rng(3)
        base = Tensor(rng.standard_normal((6, 6)))
        x = Tensor(rng.standard_normal((2, 6)))
        a = rng.standard_normal((2, 6))
        b = rng.standard_normal((6, 2))
        outs = {}
        for alpha in (4.0, 8.0):
            adapter = LoraAdapter(a=Tensor(a.copy()), b=Tensor(b.copy()),
                                  gamma=alpha / 2, base=base,
                                  config=LoraConfig(rank=2, alpha=alpha, dropout=0.0))
            outs[alpha] = lora_apply(adapter, x).data - x.data @ base.data.T
        np.testing.assert_allclose(outs[8.0], 2.0 * outs[4.0], atol=1e-12)

    def test_width_mismatch(self):
        adapter = lora_init(6, 8, LoraConfig(rank=2), seed=0)
        with pytest.raises(ShapeError):
            lora_apply(adapter, Tensor(np.zeros((3, 7))))

    def test_training_dropout_needs_rng(self):
        adapter = lora_init(6, 8, LoraConfig(rank=2, dropout=0.5), seed=0)
        with pytest.raises(ContractError):
            lora_apply(adapter, Tensor(np.zeros((3, 8))), training=True)


class TestInject:
    def test_adapter_count_and_parameter_economy(self):
        cfg = small_config()
        model = inject(ViTImageEncoder(cfg, seed=0), LoraConfig(rank=4, alpha=8.0), seed=1)
        adapters = [(n, p) for n, p in model.named_parameters() if "lora" in n]
        assert len(adapters) == 2 * 3 * cfg.num_blocks  # A and B per projection
        trainable = sum(p.size for _, p in adapters)
        assert trainable == 3 * cfg.num_blocks * 4 * (cfg.d_model + cfg.d_model)
        assert trainable < 3 * cfg.num_blocks * cfg.d_model * cfg.d_model

    def test_transparent_at_injection(self):
        cfg = small_config()
        rng = np.random.default_rng(4)
        image = rng.random((3, 16, 16))
        plain = ViTImageEncoder(cfg, seed=0)
        before = plain.forward(image).final_tokens.data.copy()
        inject(plain, LoraConfig(rank=4, alpha=8.0), seed=9)
        after = plain.forward(image).final_tokens.data
        np.testing.assert_array_equal(before, after)

    def test_double_injection_rejected(self):
        model = inject(ViTImageEncoder(small_config(), seed=0), LoraConfig(rank=4), seed=0)
        with pytest.raises(ContractError):
            inject(model, LoraConfig(rank=4), seed=0)

    def test_base_weights_frozen(self):
        model = inject(ViTImageEncoder(small_config(), seed=0), LoraConfig(rank=4), seed=0)
        for block in model.blocks:
            for w in (block.attn.wq, block.attn.wk, block.attn.wv):
                assert not w.requires_grad
            assert block.attn.q_adapter.a.requires_grad
            assert block.attn.q_adapter.b.requires_grad
