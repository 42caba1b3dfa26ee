"""Tests for the reference attribution methods."""

import numpy as np
import pytest

from shapkit import vit
from shapkit.baselines import (
    BASELINE_METHODS,
    attention_last,
    leave_one_out,
    random_ranking,
    rise,
    vanilla_gradient,
)
from shapkit.errors import UsageError
from shapkit.game import AdditiveGame, TabularGame
from shapkit.subsets import uniform_cardinality
from shapkit.tensorkit.rng import RngState


class CountingGame(TabularGame):
    """Tabular game that records how many subset rows it evaluated."""

    def __init__(self, values, d):
        super().__init__(values, d)
        self.rows = 0

    def evaluate_matrix_all(self, bits):
        self.rows += np.asarray(bits).shape[0]
        return super().evaluate_matrix_all(bits)


@pytest.fixture(scope="module")
def tiny_weights():
    config = vit.ViTConfig(image_height=8, image_width=8, channels=1,
                           patch_size=4, embed_dim=16, num_heads=2,
                           num_layers=2, num_classes=3)
    return vit.init_classifier_weights(config, RngState(31))


@pytest.fixture(scope="module")
def tiny_image():
    return RngState(32).gen.normal(size=(8, 8, 1))


class TestLeaveOneOut:
    def test_recovers_additive_weights(self):
        weights = np.array([[0.5, -1.25, 2.0, 0.0, 3.5]])
        game = AdditiveGame(np.array([0.7]), weights)
        attr = leave_one_out(game, 0)
        np.testing.assert_allclose(attr.values, weights[0], atol=1e-12)
        assert attr.method == "leave_one_out"
        assert attr.class_index == 0

    def test_matches_direct_table_lookup(self):
        d = 5
        rng = np.random.default_rng(100)
        table = rng.normal(size=(1 << d, 2))
        game = TabularGame(table, d)
        attr = leave_one_out(game, 1)
        full = (1 << d) - 1
        # bit i of the row code is membership of patch i
        expected = np.array([table[full, 1] - table[full ^ (1 << i), 1]
                             for i in range(d)])
        np.testing.assert_allclose(attr.values, expected, atol=1e-12)

    def test_uses_exactly_d_plus_one_evaluations(self):
        d = 6
        game = CountingGame(np.arange((1 << d) * 2).reshape(-1, 2), d)
        leave_one_out(game, 0)
        assert game.rows == d + 1


class TestRise:
    def test_scores_match_per_patch_conditional_means(self):
        d = 6
        base, w = np.array([0.2]), np.array([[1.0, -0.5, 2.0, 0.0, 0.3, -1.2]])
        game = AdditiveGame(base, w)
        attr = rise(game, 0, samples=500, rng=RngState(5))
        # recompute from the identical sample stream, patch by patch
        bits = uniform_cardinality(d).sample_matrix(RngState(5).gen, 500)
        vals = base[0] + bits.astype(np.float64) @ w[0]
        for i in range(d):
            rows = bits[:, i]
            assert rows.any()
            assert attr.values[i] == pytest.approx(vals[rows].mean(), abs=1e-12)
        assert attr.method == "rise"
        assert attr.class_index == 0

    def test_ranks_dominant_patch_first(self):
        game = AdditiveGame(np.array([0.0]),
                            np.array([[5.0, 0.1, 0.2, 0.05, 0.15, 0.1]]))
        attr = rise(game, 0, samples=4000, rng=RngState(6))
        assert int(np.argmax(attr.values)) == 0

    def test_deterministic(self):
        game = AdditiveGame(np.array([0.0]), np.array([[1.0, 2.0, 3.0, 4.0]]))
        a = rise(game, 0, samples=200, rng=RngState(9))
        b = rise(game, 0, samples=200, rng=RngState(9))
        np.testing.assert_array_equal(a.values, b.values)

    def test_unsampled_patches_warn_and_score_zero(self):
        d = 6
        game = AdditiveGame(np.array([1.0]), np.array([np.ones(d)]))
        with pytest.warns(UserWarning, match="never sampled"):
            attr = rise(game, 0, samples=1, rng=RngState(2))
        bits = uniform_cardinality(d).sample_matrix(RngState(2).gen, 1)
        missing = ~bits[0]
        assert missing.any()
        np.testing.assert_array_equal(attr.values[missing], 0.0)

    def test_rejects_zero_samples(self):
        game = AdditiveGame(np.array([0.0]), np.array([[1.0, 2.0]]))
        with pytest.raises(UsageError):
            rise(game, 0, samples=0)


class TestVanillaGradient:
    def test_matches_finite_differences(self, tiny_weights, tiny_image):
        y = 1
        attr = vanilla_gradient(tiny_weights, tiny_image, y)
        d = tiny_weights.config.num_patches
        tokens = vit.embed_tokens(tiny_weights, tiny_image[None])[0]
        full = np.ones((1, d), dtype=bool)
        eps = 1e-6
        grad = np.zeros_like(tokens)
        for t in range(tokens.shape[0]):
            for h in range(tokens.shape[1]):
                up, down = tokens.copy(), tokens.copy()
                up[t, h] += eps
                down[t, h] -= eps
                grad[t, h] = (vit.infer_from_tokens(tiny_weights, up, full)[0, y]
                              - vit.infer_from_tokens(tiny_weights, down, full)[0, y]
                              ) / (2 * eps)
        expected = np.abs(grad[1:]).sum(axis=1)  # drop the class token row
        np.testing.assert_allclose(attr.values, expected, rtol=1e-5, atol=1e-9)
        assert attr.values.shape == (d,)
        assert attr.method == "gradient"
        assert attr.class_index == y

    def test_rejects_bad_class(self, tiny_weights, tiny_image):
        with pytest.raises(UsageError):
            vanilla_gradient(tiny_weights, tiny_image, 3)


class TestAttentionLast:
    def test_shape_and_mass(self, tiny_weights, tiny_image):
        attr = attention_last(tiny_weights, tiny_image)
        d = tiny_weights.config.num_patches
        heads = tiny_weights.config.num_heads
        assert attr.values.shape == (d,)
        assert (attr.values >= 0.0).all()
        # each head's class-token row sums to 1, and part of it stays on
        # the class token itself
        assert 0.0 < attr.values.sum() < heads
        assert attr.method == "attention_last"
        assert attr.class_index is None

    def test_deterministic(self, tiny_weights, tiny_image):
        a = attention_last(tiny_weights, tiny_image)
        b = attention_last(tiny_weights, tiny_image)
        np.testing.assert_array_equal(a.values, b.values)

    def test_rejects_gap_models(self):
        config = vit.ViTConfig(image_height=8, image_width=8, channels=1,
                               patch_size=4, embed_dim=16, num_heads=2,
                               num_layers=1, num_classes=3, readout="gap")
        weights = vit.init_classifier_weights(config, RngState(1))
        with pytest.raises(UsageError):
            attention_last(weights, RngState(2).gen.normal(size=(8, 8, 1)))


class TestRandomRanking:
    def test_each_ranking_is_a_permutation(self):
        rankings = random_ranking(7, rng=RngState(3), repeats=10)
        assert len(rankings) == 10
        for attr in rankings:
            np.testing.assert_array_equal(np.sort(attr.values), np.arange(7.0))
            assert attr.method == "random"
            assert attr.class_index is None

    def test_repeats_differ_but_seed_reproduces(self):
        a = random_ranking(6, rng=RngState(4), repeats=5)
        b = random_ranking(6, rng=RngState(4), repeats=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.values, y.values)
        assert any(not np.array_equal(a[0].values, r.values) for r in a[1:])

    def test_rejects_zero_repeats(self):
        with pytest.raises(UsageError):
            random_ranking(5, repeats=0)


def test_method_registry_names():
    assert BASELINE_METHODS == ("leave_one_out", "rise", "gradient",
                                "attention_last", "random")
