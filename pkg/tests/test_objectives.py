"""Prompts, contrastive and classification losses, weighted total."""

import math

import numpy as np
import pytest

from endoclip.errors import ConfigError, ContractError, LabelError
from endoclip.objectives import (
    CLASS_NAMES,
    LinearHead,
    LossWeights,
    build_prompt,
    classification_loss,
    contrastive_loss,
    total_loss,
)
from endoclip.tensor import Tensor, finite_diff_check


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class TestBuildPrompt:
    def test_default_description(self):
        assert build_prompt("throat") == "A photo of a throat, Image description."

    def test_with_description(self):
        prompt = build_prompt("vc-open", "vocal cords fully abducted")
        assert prompt == "A photo of a vc-open, vocal cords fully abducted."

    def test_unknown_class_rejected(self):
        with pytest.raises(LabelError):
            build_prompt("eyeball")

    def test_class_name_always_verbatim(self):
        for name in CLASS_NAMES:
            assert name in build_prompt(name)


class TestContrastiveLoss:
    def test_single_pair_is_zero(self):
        v = Tensor(np.array([[1.0, 0.0]]))
        assert contrastive_loss(v, v).item() == 0.0

    def test_two_orthonormal_pairs_closed_form(self):
        e = np.eye(2)
        loss = contrastive_loss(Tensor(e.copy()), Tensor(e.copy()))
        np.testing.assert_allclose(loss.item(), math.log(1.0 + math.exp(-1.0)), atol=1e-12)

    def test_swap_symmetry_bitwise(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n, d = int(rng.integers(1, 9)), int(rng.integers(2, 17))
            v = Tensor(unit_rows(rng, n, d))
            u = Tensor(unit_rows(rng, n, d))
            assert contrastive_loss(v, u).item() == contrastive_loss(u, v).item()

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            v = Tensor(unit_rows(rng, 5, 8))
            u = Tensor(unit_rows(rng, 5, 8))
            assert contrastive_loss(v, u).item() >= 0.0

    def test_matched_alignment_beats_permutations(self):
        rng = np.random.default_rng(2)
        v = unit_rows(rng, 4, 6)
        base = contrastive_loss(Tensor(v.copy()), Tensor(v.copy())).item()
        for _ in range(10):
            perm = rng.permutation(4)
            if np.array_equal(perm, np.arange(4)):
                continue
            shuffled = contrastive_loss(Tensor(v.copy()), Tensor(v[perm].copy())).item()
            assert base <= shuffled

    def test_contract_violations(self):
        ok = Tensor(np.eye(2))
        with pytest.raises(ContractError):
            contrastive_loss(Tensor(2.0 * np.eye(2)), ok)
        with pytest.raises(ContractError):
            contrastive_loss(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))))
        with pytest.raises(ContractError):
            contrastive_loss(ok, Tensor(np.eye(3)))

    def test_temperature_scales_logits(self):
        rng = np.random.default_rng(3)
        v = Tensor(unit_rows(rng, 3, 5))
        u = Tensor(unit_rows(rng, 3, 5))
        hot = contrastive_loss(v, u, temperature=1.0).item()
        cold = contrastive_loss(v, u, temperature=0.1).item()
        assert hot != cold

    def test_gradient(self):
        rng = np.random.default_rng(4)
        raw = rng.standard_normal((3, 5))
        v = Tensor(raw / np.linalg.norm(raw, axis=1, keepdims=True), requires_grad=True)
        u = Tensor(unit_rows(rng, 3, 5))

        def f():
            return contrastive_loss(v, u)

        # perturbed rows drift off unit norm, so probe through a fresh normalize
        from endoclip.tensor import concat_rows, l2_normalize, row

        def f_normed():
            rows = [l2_normalize(row(v, i)) for i in range(3)]
            return contrastive_loss(concat_rows(rows), u)

        assert finite_diff_check(f_normed, [v], step=1e-6) < 1e-5
        del f


class TestClassificationLoss:
    def test_zero_head_gives_log7(self):
        head = LinearHead(8, seed=0)
        head.w.data[:] = 0.0
        feats = Tensor(np.random.default_rng(0).standard_normal((5, 8)))
        loss = classification_loss(feats, [0, 1, 2, 3, 4], head)
        np.testing.assert_allclose(loss.item(), math.log(7.0), atol=1e-12)

    def test_confident_correct_logits_drive_loss_to_zero(self):
        head = LinearHead(7, seed=0)
        head.w.data = np.eye(7) * 50.0
        head.b.data[:] = 0.0
        feats = Tensor(np.eye(7))
        loss = classification_loss(feats, list(range(7)), head)
        assert loss.item() < 1e-12

    def test_label_out_of_range(self):
        head = LinearHead(4, seed=0)
        feats = Tensor(np.zeros((2, 4)))
        with pytest.raises(LabelError):
            classification_loss(feats, [0, 7], head)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        head = LinearHead(6, seed=1)
        feats = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        labels = [0, 3, 6, 2]

        def f():
            return classification_loss(feats, labels, head)

        assert finite_diff_check(f, [feats, head.w, head.b]) < 1e-5


class TestTotalLoss:
    def test_reference_arithmetic(self):
        total = total_loss(Tensor(np.array(1.9459)), Tensor(np.array(0.3133)),
                           LossWeights(mu1=1.0, mu2=0.5))
        np.testing.assert_allclose(total.item(), 2.10255, atol=1e-6)

    def test_contrastive_disabled(self):
        total = total_loss(Tensor(np.array(1.25)), Tensor(np.array(9.0)),
                           LossWeights(mu1=1.0, mu2=0.0))
        assert total.item() == 1.25

    def test_both_off(self):
        total = total_loss(Tensor(np.array(3.0)), Tensor(np.array(0.0)),
                           LossWeights(mu1=0.0, mu2=0.5))
        assert total.item() == 0.0

    def test_linear_in_each_component(self):
        w = LossWeights(mu1=2.0, mu2=3.0)
        a = total_loss(Tensor(np.array(1.0)), Tensor(np.array(1.0)), w).item()
        b = total_loss(Tensor(np.array(2.0)), Tensor(np.array(1.0)), w).item()
        c = total_loss(Tensor(np.array(1.0)), Tensor(np.array(2.0)), w).item()
        assert b - a == 2.0
        assert c - a == 3.0

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(mu1=-1.0)
