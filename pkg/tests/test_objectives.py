import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from _helpers import random_batch
from vlrefine.objectives import (IGNORE_INDEX, ContractViolation, DivergenceError, LossBundle, MaskPlan,
                                 build_itm_examples, compute_losses, gm_loss, gm_mask, itc_loss, itm_loss, mask_count,
                                 mlm_loss, mlm_mask, negative_probabilities, sample_hard_negative, sample_negatives,
                                 total_loss)


def brute_force_itc(img: np.ndarray, txt: np.ndarray, tau: float) -> float:
    """Symmetric InfoNCE written out with explicit sums, in float64."""
    B = img.shape[0]
    s = np.array([[sum(img[i, k] * txt[j, k] for k in range(img.shape[1])) for j in range(B)] for i in range(B)])
    i2t = 0.0
    t2i = 0.0
    for i in range(B):
        i2t += -s[i, i] / tau + math.log(sum(math.exp(s[i, j] / tau) for j in range(B)))
        t2i += -s[i, i] / tau + math.log(sum(math.exp(s[j, i] / tau) for j in range(B)))
    return 0.5 * (i2t / B + t2i / B)


def unit_rows(rng, b, d):
    x = rng.standard_normal((b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestITC:
    def test_identical_embeddings_uniform_case(self):
        for B in (2, 4, 8):
            e = torch.nn.functional.normalize(torch.ones(B, 6, dtype=torch.float64), dim=-1)
            assert abs(float(itc_loss(e, e, 1.0)) - math.log(B)) < 1e-6

    def test_single_pair_is_zero(self):
        e = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        assert float(itc_loss(e, e, 0.07)) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_pair(self):
        e = torch.eye(2, dtype=torch.float64)
        expected = math.log(1 + math.exp(-1))
        assert abs(float(itc_loss(e, e, 1.0)) - expected) < 1e-6
        assert abs(expected - 0.3132617) < 1e-7

    def test_random_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            B, d = int(rng.integers(1, 7)), int(rng.integers(2, 9))
            img, txt = unit_rows(rng, B, d), unit_rows(rng, B, d)
            tau = float(rng.uniform(0.05, 1.0))
            got = float(itc_loss(torch.as_tensor(img), torch.as_tensor(txt), tau))
            assert got == pytest.approx(brute_force_itc(img, txt, tau), abs=1e-9)

    def test_symmetric_under_swap(self):
        rng = np.random.default_rng(1)
        img, txt = (torch.as_tensor(unit_rows(rng, 5, 4)) for _ in range(2))
        assert float(itc_loss(img, txt, 0.1)) == pytest.approx(float(itc_loss(txt, img, 0.1)), abs=1e-12)

    def test_requires_unit_rows(self):
        with pytest.raises(ContractViolation):
            itc_loss(torch.ones(2, 3), torch.ones(2, 3), 0.07)

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            itc_loss(torch.eye(2), torch.eye(3), 0.07)


class TestNegatives:
    def test_probabilities_exclude_self(self):
        p = negative_probabilities(np.array([0.9, 0.1, 0.5, -0.2]), 0, 0.1)
        assert p[0] == 0.0
        assert p.sum() == pytest.approx(1.0)
        expected = np.exp(np.array([0.1, 0.5, -0.2]) / 0.1)
        np.testing.assert_allclose(p[1:], expected / expected.sum())

    def test_batch_of_one(self):
        with pytest.raises(ValueError):
            negative_probabilities(np.array([1.0]), 0, 1.0)
        with pytest.raises(ValueError):
            sample_negatives(None, np.random.default_rng(0), batch_size=1)

    def test_sampled_index_never_self(self):
        rng = np.random.default_rng(2)
        row = rng.standard_normal(6)
        assert all(sample_hard_negative(row, 3, rng, 0.07) != 3 for _ in range(500))

    def test_uniform_when_no_similarities(self):
        rng = np.random.default_rng(3)
        counts = np.zeros(4)
        for _ in range(4000):
            neg_txt, neg_img = sample_negatives(None, rng, batch_size=4)
            assert (neg_txt != np.arange(4)).all() and (neg_img != np.arange(4)).all()
            counts[neg_txt[0]] += 1
        np.testing.assert_allclose(counts[1:] / 4000, 1 / 3, atol=0.03)

    def test_itm_example_layout(self):
        img, txt, lab = build_itm_examples([1, 0, 0], [2, 2, 1])
        assert img.tolist() == [0, 1, 2, 0, 1, 2, 2, 2, 1]
        assert txt.tolist() == [0, 1, 2, 1, 0, 0, 0, 1, 2]
        assert lab.tolist() == [1, 1, 1, 0, 0, 0, 0, 0, 0]


class TestITM:
    def test_near_ln2_at_init(self, tiny_model):
        images, ids, valid = random_batch(tiny_model.cfg, 4, np.random.default_rng(4))
        vis = tiny_model.vision(images).tokens
        loss = itm_loss(tiny_model, vis, ids, valid, rng=np.random.default_rng(0))
        assert abs(loss.item() - math.log(2)) < 0.05

    def test_fixed_negatives_are_deterministic(self, tiny_model):
        images, ids, valid = random_batch(tiny_model.cfg, 3, np.random.default_rng(5))
        vis = tiny_model.vision(images).tokens
        a = itm_loss(tiny_model, vis, ids, valid, negatives=([1, 2, 0], [2, 0, 1]))
        b = itm_loss(tiny_model, vis, ids, valid, negatives=([1, 2, 0], [2, 0, 1]))
        assert torch.equal(a, b)

    def test_batch_of_one_is_skipped(self, tiny_model, caplog):
        images, ids, valid = random_batch(tiny_model.cfg, 1, np.random.default_rng(6))
        loss = itm_loss(tiny_model, tiny_model.vision(images).tokens, ids, valid, rng=np.random.default_rng(0))
        assert loss.item() == 0.0
        assert "ITM skipped" in caplog.text


class TestMasking:
    @pytest.mark.parametrize("n,rate,expected", [(1, 0.15, 1), (3, 0.15, 1), (10, 0.15, 2), (4, 0.6, 2),
                                                 (5, 0.6, 3), (7, 0.15, 1), (20, 0.15, 3)])
    def test_mask_count_rounds_half_up(self, n, rate, expected):
        assert mask_count(n, rate) == expected

    def test_mlm_plan(self, tiny_model):
        _, ids, valid = random_batch(tiny_model.cfg, 6, np.random.default_rng(7))
        plan = mlm_mask(ids, valid, np.random.default_rng(0))
        assert (plan.replaced_ids[plan.positions] == 3).all()
        assert torch.equal(plan.replaced_ids[~plan.positions], ids[~plan.positions])
        assert torch.equal(plan.labels[plan.positions], ids[plan.positions])
        assert (plan.labels[~plan.positions] == IGNORE_INDEX).all()
        assert not plan.positions[:, 0].any()

    def test_gm_plan_keeps_inputs(self, tiny_model):
        _, ids, valid = random_batch(tiny_model.cfg, 6, np.random.default_rng(8))
        plan = gm_mask(ids, valid, np.random.default_rng(0))
        assert torch.equal(plan.replaced_ids, ids)
        maskable = valid & (ids > 2)
        counts = plan.positions.sum(1)
        assert counts.tolist() == [mask_count(int(m), 0.6) for m in maskable.sum(1)]

    def test_report_without_content_tokens(self):
        ids = torch.tensor([[0, 1, 2]])
        valid = torch.tensor([[True, True, False]])
        with pytest.raises(ContractViolation):
            mlm_mask(ids, valid, np.random.default_rng(0))

    def test_empty_plan_rejected(self, tiny_model):
        _, ids, valid = random_batch(tiny_model.cfg, 2, np.random.default_rng(9))
        plan = MaskPlan(torch.zeros_like(valid), ids, torch.full_like(ids, IGNORE_INDEX))
        with pytest.raises(ContractViolation):
            mlm_loss(tiny_model, torch.zeros(2, 16, 16), valid, plan)


def _hidden_grad(model, loss_fn):
    """Gradient of a loss w.r.t. the text encoder's final hidden states."""
    store = {}

    def hook(module, inputs, output):
        output.retain_grad()
        store["h"] = output

    handle = model.text.norm.register_forward_hook(hook)
    try:
        loss_fn().backward()
    finally:
        handle.remove()
    return store["h"].grad


class TestLanguageModeling:
    def test_mlm_near_ln_vocab_at_init(self, tiny_model):
        images, ids, valid = random_batch(tiny_model.cfg, 8, np.random.default_rng(10))
        plan = mlm_mask(ids, valid, np.random.default_rng(0))
        loss = mlm_loss(tiny_model, tiny_model.vision(images).tokens, valid, plan)
        assert abs(loss.item() - math.log(tiny_model.cfg.text.vocab_size)) < 0.1

    def test_mlm_gradient_only_reaches_masked_rows(self, tiny_model):
        images, ids, valid = random_batch(tiny_model.cfg, 3, np.random.default_rng(11))
        plan = mlm_mask(ids, valid, np.random.default_rng(0))
        vis = tiny_model.vision(images).tokens.detach()
        g = _hidden_grad(tiny_model, lambda: mlm_loss(tiny_model, vis, valid, plan))
        assert (g[~plan.positions] == 0).all()
        assert (g[plan.positions].abs().sum(-1) > 0).all()

    def test_gm_predicts_from_previous_position(self, tiny_model):
        images, ids, valid = random_batch(tiny_model.cfg, 3, np.random.default_rng(12))
        plan = gm_mask(ids, valid, np.random.default_rng(0))
        vis = tiny_model.vision(images).tokens.detach()
        g = _hidden_grad(tiny_model, lambda: gm_loss(tiny_model, vis, valid, plan))
        source = torch.zeros_like(plan.positions)
        source[:, :-1] = plan.positions[:, 1:]
        assert (g[~source] == 0).all()
        assert (g[source].abs().sum(-1) > 0).all()

    def test_gm_matches_manual_cross_entropy(self, tiny_model):
        images, ids, valid = random_batch(tiny_model.cfg, 2, np.random.default_rng(13))
        plan = gm_mask(ids, valid, np.random.default_rng(0))
        vis = tiny_model.vision(images).tokens
        out = tiny_model.text(ids, valid, mode="cross_causal", visual_tokens=vis).tokens
        terms = []
        for b, t in torch.nonzero(plan.positions).tolist():
            terms.append(F.cross_entropy(tiny_model.lm_logits(out[b, t - 1])[None], ids[b, t][None]))
        expected = torch.stack(terms).mean()
        assert gm_loss(tiny_model, vis, valid, plan).item() == pytest.approx(expected.item(), rel=1e-5)

    def test_gm_rejects_position_zero(self, tiny_model):
        _, ids, valid = random_batch(tiny_model.cfg, 1, np.random.default_rng(14))
        pos = torch.zeros_like(valid)
        pos[0, 0] = True
        with pytest.raises(ContractViolation):
            gm_loss(tiny_model, torch.zeros(1, 16, 16), valid, MaskPlan(pos, ids, ids))


class TestCombined:
    def test_total_is_plain_sum(self):
        b = LossBundle(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0), torch.tensor(4.5))
        assert float(total_loss(b)) == 10.5

    def test_divergence_names_component(self):
        b = LossBundle(torch.tensor(1.0), torch.tensor(float("nan")), torch.tensor(3.0), torch.tensor(4.0))
        with pytest.raises(DivergenceError, match="itm"):
            total_loss(b)

    def test_excluded_losses_are_zero_and_detached(self, tiny_model):
        images, ids, valid = random_batch(tiny_model.cfg, 4, np.random.default_rng(15))
        bundle = compute_losses(tiny_model, images, ids, valid, np.random.default_rng(0), losses=("itc",))
        assert bundle.itm.item() == bundle.mlm.item() == bundle.gm.item() == 0.0
        total_loss(bundle).backward()
        assert tiny_model.itm_head.weight.grad is None
        assert tiny_model.lm_bias.grad is None
        assert tiny_model.text.blocks[0].cross_attn.q.weight.grad is None
        assert tiny_model.log_temp.grad is not None

    def test_all_losses_reproducible_from_rng(self, tiny_model):
        images, ids, valid = random_batch(tiny_model.cfg, 4, np.random.default_rng(16))
        a = compute_losses(tiny_model, images, ids, valid, np.random.default_rng(7)).as_floats()
        b = compute_losses(tiny_model, images, ids, valid, np.random.default_rng(7)).as_floats()
        assert a == b
        assert all(v > 0 for v in a.values())

    def test_unknown_loss_name(self, tiny_model):
        images, ids, valid = random_batch(tiny_model.cfg, 2, np.random.default_rng(17))
        with pytest.raises(ValueError):
            compute_losses(tiny_model, images, ids, valid, np.random.default_rng(0), losses=("itc", "mae"))
