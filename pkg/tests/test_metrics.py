"""Tests for the attribution quality metrics and retraining curves."""

import numpy as np
import pytest

from shapkit import vit
from shapkit.errors import UsageError
from shapkit.game import AdditiveGame, TabularGame
from shapkit.metrics import (
    ROAR_STRATEGIES,
    faithfulness_correlation,
    insertion_deletion,
    ranking_order,
    roar_curve,
    sensitivity_n,
)
from shapkit.tensorkit.rng import RngState
from shapkit.vit import TrainSchedule


class TestRankingOrder:
    def test_descending(self):
        np.testing.assert_array_equal(ranking_order(np.array([0.1, 3.0, -2.0, 1.5])),
                                      [1, 3, 0, 2])

    def test_ties_break_toward_lower_index(self):
        np.testing.assert_array_equal(ranking_order(np.array([1.0, 3.0, 3.0, 0.0])),
                                      [1, 2, 0, 3])
        np.testing.assert_array_equal(ranking_order(np.zeros(5)), np.arange(5))


class TestInsertionDeletion:
    def test_matches_hand_walk_on_table(self):
        d = 3
        rng = np.random.default_rng(50)
        table = rng.normal(size=(1 << d, 2))
        game = TabularGame(table, d)
        values = np.array([0.5, 2.0, -1.0])  # ranking: 1, 0, 2
        res = insertion_deletion(game, 1, values, mode="insertion")
        # codes along the path: {} -> {1} -> {0,1} -> {0,1,2}
        expected_curve = table[[0b000, 0b010, 0b011, 0b111], 1]
        np.testing.assert_allclose(res.curve, expected_curve, atol=1e-12)
        np.testing.assert_allclose(res.fractions, np.arange(4) / 3, atol=1e-15)
        auc = np.trapezoid(expected_curve, np.arange(4) / 3)
        assert res.auc == pytest.approx(auc, abs=1e-12)

        dele = insertion_deletion(game, 1, values, mode="deletion")
        expected_del = table[[0b111, 0b101, 0b100, 0b000], 1]
        np.testing.assert_allclose(dele.curve, expected_del, atol=1e-12)

    def test_curve_endpoints(self):
        game = AdditiveGame(np.array([0.3]), np.array([[1.0, -2.0, 0.5, 0.7]]))
        ins = insertion_deletion(game, 0, np.array([4.0, 3.0, 2.0, 1.0]))
        grand, null = game.grand_and_null(0)
        assert ins.curve[0] == pytest.approx(null, abs=1e-12)
        assert ins.curve[-1] == pytest.approx(grand, abs=1e-12)
        dele = insertion_deletion(game, 0, np.array([4.0, 3.0, 2.0, 1.0]),
                                  mode="deletion")
        assert dele.curve[0] == pytest.approx(grand, abs=1e-12)
        assert dele.curve[-1] == pytest.approx(null, abs=1e-12)

    def test_additive_insertion_is_cumulative_sorted_sum(self):
        base, w = 0.4, np.array([1.5, -0.2, 3.0, 0.8, -1.1])
        game = AdditiveGame(np.array([base]), np.array([w]))
        res = insertion_deletion(game, 0, w)  # rank by the true weights
        expected = base + np.concatenate([[0.0], np.cumsum(np.sort(w)[::-1])])
        np.testing.assert_allclose(res.curve, expected, atol=1e-12)

    def test_good_ranking_beats_reversed_ranking(self):
        w = np.array([3.0, 1.0, 2.0, 0.5, 1.5, 0.1])
        game = AdditiveGame(np.array([0.0]), np.array([[*w]]))
        good = insertion_deletion(game, 0, w).auc
        bad = insertion_deletion(game, 0, -w).auc
        assert good > bad
        good_del = insertion_deletion(game, 0, w, mode="deletion").auc
        bad_del = insertion_deletion(game, 0, -w, mode="deletion").auc
        assert good_del < bad_del

    def test_validation(self):
        game = AdditiveGame(np.array([0.0]), np.array([[1.0, 2.0]]))
        with pytest.raises(UsageError):
            insertion_deletion(game, 0, np.array([1.0, 2.0]), mode="sideways")
        with pytest.raises(UsageError):
            insertion_deletion(game, 0, np.array([1.0, 2.0, 3.0]))


class TestCorrelations:
    def test_exact_weights_correlate_perfectly(self):
        w = np.array([1.0, -0.5, 2.0, 0.3, -1.2, 0.8])
        game = AdditiveGame(np.array([0.2]), np.array([[*w]]))
        for n in (1, 3, 5):
            res = sensitivity_n(game, 0, w, n=n, samples=200, rng=RngState(1))
            assert res.defined
            assert res.value == pytest.approx(1.0, abs=1e-12)
        faith = faithfulness_correlation(game, 0, w, samples=300, rng=RngState(2))
        assert faith.defined
        assert faith.value == pytest.approx(1.0, abs=1e-12)

    def test_negated_weights_anticorrelate(self):
        w = np.array([1.0, -0.5, 2.0, 0.3])
        game = AdditiveGame(np.array([0.0]), np.array([[*w]]))
        res = sensitivity_n(game, 0, -w, n=2, samples=200, rng=RngState(3))
        assert res.value == pytest.approx(-1.0, abs=1e-12)

    def test_constant_prediction_is_undefined(self):
        # equal attributions over fixed-size subsets give zero variance
        game = AdditiveGame(np.array([0.0]), np.array([[1.0, 2.0, 3.0, 4.0]]))
        res = sensitivity_n(game, 0, np.ones(4), n=2, samples=100, rng=RngState(4))
        assert not res.defined
        assert np.isnan(res.value)

    def test_constant_game_is_undefined(self):
        game = AdditiveGame(np.array([1.0]), np.array([[0.0, 0.0, 0.0, 0.0]]))
        res = faithfulness_correlation(game, 0, np.array([1.0, 2.0, 3.0, 4.0]),
                                       samples=100, rng=RngState(5))
        assert not res.defined

    def test_deterministic(self):
        w = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        game = AdditiveGame(np.array([0.0]), np.array([[*w]]))
        noisy = w + RngState(6).gen.normal(size=5)
        a = faithfulness_correlation(game, 0, noisy, samples=150, rng=RngState(7))
        b = faithfulness_correlation(game, 0, noisy, samples=150, rng=RngState(7))
        assert a.value == b.value

    def test_validation(self):
        game = AdditiveGame(np.array([0.0]), np.array([[1.0, 2.0, 3.0]]))
        with pytest.raises(UsageError):
            sensitivity_n(game, 0, np.ones(3), n=0)
        with pytest.raises(UsageError):
            sensitivity_n(game, 0, np.ones(3), n=4)
        with pytest.raises(UsageError):
            sensitivity_n(game, 0, np.ones(3), n=2, samples=1)
        with pytest.raises(UsageError):
            faithfulness_correlation(game, 0, np.ones(3), samples=1)


def signal_attributions(split, d):
    """1.0 on each example's planted patches, 0 elsewhere."""
    att = np.zeros((len(split), d))
    for i, row in enumerate(split.signal):
        att[i, row] = 1.0
    return att


class TestRoarCurve:
    def test_masking_strategies_match_direct_accuracy(self, surrogate_model,
                                                      splits, planted_config):
        d = surrogate_model.config.num_patches
        att = {"test": signal_attributions(splits.test, d)}
        for strategy in ("surrogate_eval", "masked_eval"):
            curve = roar_curve(strategy, splits, att, [0],
                               evaluator=surrogate_model)
            assert curve == [(0, vit.accuracy(surrogate_model,
                                              splits.test.images,
                                              splits.test.labels))]

    def test_removing_signal_patches_hurts(self, surrogate_model, splits):
        d = surrogate_model.config.num_patches
        att = {"test": signal_attributions(splits.test, d)}
        curve = dict(roar_curve("surrogate_eval", splits, att, [0, 2],
                                evaluator=surrogate_model))
        assert curve[0] > 0.8
        assert curve[2] < curve[0] - 0.2

    def test_full_removal_runs_on_class_token_models(self, surrogate_model, splits):
        d = surrogate_model.config.num_patches
        att = {"test": signal_attributions(splits.test, d)}
        curve = roar_curve("surrogate_eval", splits, att, [d],
                           evaluator=surrogate_model)
        assert 0.0 <= curve[0][1] <= 1.0

    def test_retrain_strategies_run(self, splits, vit_config):
        d = vit_config.num_patches
        att = {"test": signal_attributions(splits.test, d),
               "train": signal_attributions(splits.train, d)}
        schedule = TrainSchedule(epochs=1, batch_size=32, lr=2e-3)
        for strategy in ("retrain", "retrain_no_pos"):
            curve = roar_curve(strategy, splits, att, [0, 2],
                               model_config=vit_config, schedule=schedule,
                               rng=RngState(8))
            assert [k for k, _ in curve] == [0, 2]
            assert all(0.0 <= acc <= 1.0 for _, acc in curve)
        assert vit_config.use_positional  # retrain_no_pos must not mutate it

    def test_retrain_deterministic(self, splits, vit_config):
        d = vit_config.num_patches
        att = {"test": signal_attributions(splits.test, d),
               "train": signal_attributions(splits.train, d)}
        schedule = TrainSchedule(epochs=1, batch_size=32, lr=2e-3)
        a = roar_curve("retrain", splits, att, [1], model_config=vit_config,
                       schedule=schedule, rng=RngState(9))
        b = roar_curve("retrain", splits, att, [1], model_config=vit_config,
                       schedule=schedule, rng=RngState(9))
        assert a == b

    def test_validation(self, surrogate_model, splits, vit_config):
        d = vit_config.num_patches
        att = {"test": signal_attributions(splits.test, d)}
        with pytest.raises(UsageError):
            roar_curve("drop_random", splits, att, [0], evaluator=surrogate_model)
        with pytest.raises(UsageError):
            roar_curve("surrogate_eval", splits, {}, [0], evaluator=surrogate_model)
        with pytest.raises(UsageError):
            roar_curve("surrogate_eval", splits, att, [d + 1],
                       evaluator=surrogate_model)
        with pytest.raises(UsageError):
            roar_curve("surrogate_eval", splits, att, [0])  # no evaluator
        with pytest.raises(UsageError):
            roar_curve("retrain", splits, att, [0], schedule=TrainSchedule(epochs=1))
        with pytest.raises(UsageError):
            # retraining also needs training-split attributions
            roar_curve("retrain", splits, att, [0], model_config=vit_config,
                       schedule=TrainSchedule(epochs=1), rng=RngState(0))

    def test_strategy_registry(self):
        assert ROAR_STRATEGIES == ("surrogate_eval", "masked_eval",
                                   "retrain", "retrain_no_pos")
