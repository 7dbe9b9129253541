import numpy as np
import pytest

from _helpers import tiny_config
from vlrefine.corpus import build_vocab, tokenize
from vlrefine.encoders import build_model
from vlrefine.explain import (SaliencyMap, capture_cross_attention, explain, localization_hit, overlay, query_rows, rollout,
                              write_saliency_csv)


@pytest.fixture
def setup():
    vocab = build_vocab(["fluid pocket in the retina ."])
    model = build_model(tiny_config(vocab_size=len(vocab)), seed=2)
    return model, vocab


class TestRollout:
    def test_one_hot_attention(self):
        stack = np.zeros((1, 1, 3, 16))
        stack[0, 0, 1, 6] = 1.0
        stack[0, 0, [0, 2], 0] = 1.0
        sal = rollout(stack, [1], image_size=16)
        expected = np.zeros((4, 4))
        expected[1, 2] = 1.0
        assert np.array_equal(sal.grid, expected)
        assert sal.upsampled.shape == (16, 16)
        assert np.all(sal.upsampled[4:8, 8:12] == 1.0) and sal.upsampled.sum() == 16

    def test_uniform_attention_is_all_zero(self):
        sal = rollout(np.full((2, 2, 4, 16), 1 / 16), [1, 2], image_size=8)
        assert np.array_equal(sal.grid, np.zeros((4, 4)))

    def test_head_permutation_invariance(self):
        rng = np.random.default_rng(0)
        stack = rng.dirichlet(np.ones(16), size=(2, 3, 5))
        a = rollout(stack, [1, 2, 3]).grid
        b = rollout(stack[:, [2, 0, 1]], [1, 2, 3]).grid
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_range_and_max(self):
        rng = np.random.default_rng(1)
        sal = rollout(rng.dirichlet(np.ones(16), size=(2, 2, 4)), [1, 2])
        assert sal.grid.min() == 0.0 and sal.grid.max() == 1.0

    def test_non_square_grid(self):
        with pytest.raises(ValueError):
            rollout(np.full((1, 1, 2, 12), 1 / 12), [0])


class TestQueries:
    def test_all_selects_content_tokens(self):
        ids = np.array([0, 7, 8, 1, 2, 2])
        valid = np.array([1, 1, 1, 1, 0, 0], dtype=bool)
        assert query_rows(ids, valid, "all").tolist() == [1, 2]
        assert query_rows(ids, valid, 2).tolist() == [2]

    @pytest.mark.parametrize("q", [0, 3, 4, 99])
    def test_special_queries_rejected(self, q):
        ids = np.array([0, 7, 8, 1, 2, 2])
        valid = np.array([1, 1, 1, 1, 0, 0], dtype=bool)
        with pytest.raises(ValueError):
            query_rows(ids, valid, q)


class TestCapture:
    def test_stack_shape_and_rows(self, setup):
        model, vocab = setup
        ids, valid = tokenize("fluid pocket in the retina .", vocab, 12)
        stack = capture_cross_attention(model, np.random.default_rng(0).random((1, 16, 16)), ids, valid)
        assert stack.shape == (2, 2, 12, 16)
        np.testing.assert_allclose(stack.sum(-1), 1.0, atol=1e-5)
        assert (stack >= 0).all()

    def test_explain_end_to_end(self, setup, tmp_path):
        model, vocab = setup
        image = np.random.default_rng(1).random((1, 16, 16)).astype(np.float32)
        sal = explain(model, image, "fluid pocket in the retina .", vocab, "all")
        assert sal.grid.shape == (4, 4) and sal.upsampled.shape == (16, 16)
        assert 0.0 <= sal.grid.min() and sal.grid.max() <= 1.0
        single = explain(model, image, "fluid pocket in the retina .", vocab, 1)
        assert single.grid.shape == (4, 4)
        rgb = sal.overlay(image, 0.5)
        assert rgb.shape == (16, 16, 3) and rgb.dtype == np.uint8
        write_saliency_csv(sal.grid, tmp_path / "s.csv")
        back = np.loadtxt(tmp_path / "s.csv", delimiter=",")
        assert np.array_equal(back, sal.grid)

    def test_explain_keeps_training_flag(self, setup):
        model, vocab = setup
        model.train()
        explain(model, np.zeros((1, 16, 16), dtype=np.float32), "fluid .", vocab)
        assert model.training


class TestOverlayAndHits:
    def test_overlay_without_saliency_is_grayscale(self):
        img = np.linspace(0, 1, 16).reshape(4, 4)
        out = overlay(img, np.zeros((4, 4)), alpha=0.7)
        assert np.array_equal(out[..., 0], out[..., 1]) and np.array_equal(out[..., 1], out[..., 2])
        assert out[0, 0, 0] == 0 and out[3, 3, 0] == 255

    def test_overlay_full_saliency_is_yellow(self):
        out = overlay(np.zeros((2, 2)), np.ones((2, 2)), alpha=1.0)
        assert out[0, 0].tolist() == [255, 255, 0]

    def test_localization_hit(self):
        up = np.zeros((4, 4))
        up[:2, :2] = 1.0
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        assert localization_hit(SaliencyMap(up[::2, ::2], up), mask)
        assert not localization_hit(SaliencyMap(up[::2, ::2], up), ~mask & (up == 0))
        with pytest.raises(ValueError):
            localization_hit(SaliencyMap(up, up), np.zeros((4, 4), dtype=bool))
