"""Learned explainer: initialization anchor, the efficiency projection, loss
plumbing against hand computation, training quality, and checkpoints."""

import numpy as np
import pytest

from shapkit import exact, explainer, game, vit
from shapkit.errors import UsageError
from shapkit.explainer import (
    ExplainerTrainConfig,
    ValidationTuple,
    build_validation_tuples,
    explain,
    explain_all,
    init_explainer,
    load_explainer,
    normalize_efficient,
    save_explainer,
    subset_residual_loss,
    train_explainer,
    validation_loss,
)
from shapkit.game import ModelGame, Subset
from shapkit.subsets import shapley_kernel
from shapkit.tensorkit import RngState


class TestNormalization:
    def test_efficiency_exact_and_idempotent(self):
        rng = np.random.default_rng(0)
        raw = rng.normal(size=(3, 8, 4))
        delta = rng.normal(size=(3, 4))
        phi = normalize_efficient(raw, delta)
        np.testing.assert_allclose(phi.sum(axis=1), delta, atol=1e-12)
        again = normalize_efficient(phi, delta)
        np.testing.assert_allclose(again, phi, atol=1e-15)

    def test_shift_is_uniform_across_patches(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(size=(8, 4))
        delta = rng.normal(size=4)
        shift = normalize_efficient(raw, delta) - raw
        np.testing.assert_allclose(shift, np.broadcast_to(shift[:1], shift.shape),
                                   atol=1e-12)


class TestInitialization:
    def test_fresh_explainer_outputs_uniform_split(self, surrogate_model, splits):
        # The output layer starts at zero, so before training every patch
        # gets exactly (v(full) - v(empty)) / d for every class.
        model = init_explainer(surrogate_model, RngState(0))
        images = splits.test.images[:4]
        phi = explain_all(model, images)
        d = model.config.num_patches
        for i in range(4):
            g = ModelGame(surrogate_model, images[i])
            for y in range(model.config.num_classes):
                grand, null = g.grand_and_null(y)
                np.testing.assert_allclose(phi[i, :, y], (grand - null) / d,
                                           atol=1e-12)

    def test_random_init_differs(self, surrogate_model):
        a = init_explainer(surrogate_model, RngState(1), init_from="surrogate")
        b = init_explainer(surrogate_model, RngState(1), init_from="random")
        assert not np.array_equal(a.backbone.patch_w.data, b.backbone.patch_w.data)
        with pytest.raises(UsageError):
            init_explainer(surrogate_model, RngState(1), init_from="scratch")

    def test_parameters_exclude_frozen_surrogate(self, surrogate_model):
        model = init_explainer(surrogate_model, RngState(2))
        ids = {id(p) for p in model.parameters()}
        for p in model.surrogate.parameters():
            assert id(p) not in ids


class TestEfficiencyOfExplanations:
    def test_gap_zero_for_every_input_and_class(self, explainer_model, splits):
        images = splits.test.images[:16]
        phi = explain_all(explainer_model, images)
        for i in range(16):
            g = ModelGame(explainer_model.surrogate, images[i])
            for y in range(explainer_model.config.num_classes):
                grand, null = g.grand_and_null(y)
                assert abs(phi[i, :, y].sum() - (grand - null)) < 1e-12

    def test_explain_single_class_slice(self, explainer_model, splits):
        image = splits.test.images[0]
        full = explain(explainer_model, image)
        assert full.shape == (8, 4)
        one = explain(explainer_model, image, class_index=2)
        np.testing.assert_array_equal(one, full[:, 2])
        with pytest.raises(UsageError):
            explain(explainer_model, image, class_index=7)


class TestLossPlumbing:
    def test_subset_residual_loss_by_hand(self):
        rng = np.random.default_rng(3)
        g = game.TabularGame(rng.normal(size=(16, 1)), 4)
        phi = rng.normal(size=4)
        bits = np.array([[1, 0, 1, 0], [0, 1, 1, 1]], dtype=bool)
        v0 = g.evaluate(Subset.empty(4), 0)
        want = np.mean([(g.evaluate(Subset.from_index(4, 0b0101), 0) - v0
                         - (phi[0] + phi[2])) ** 2,
                        (g.evaluate(Subset.from_index(4, 0b1110), 0) - v0
                         - (phi[1] + phi[2] + phi[3])) ** 2])
        got = subset_residual_loss(phi, g, 0, bits)
        assert got == pytest.approx(want, abs=1e-12)

    def test_weighted_population_loss_minimized_by_exact_values(self):
        rng = np.random.default_rng(4)
        g = game.TabularGame(rng.normal(size=(64, 1)), 6)
        dist = shapley_kernel(6)
        bits = game.all_subsets_matrix(6)
        interior = (bits.sum(axis=1) > 0) & (bits.sum(axis=1) < 6)
        weights = np.array([dist.pmf(Subset.from_index(6, c)) for c in range(64)])
        phi_star = exact.shapley_enumeration(g, 0).values
        base = subset_residual_loss(phi_star, g, 0, bits[interior], weights[interior])
        for trial in range(10):
            delta = rng.normal(size=6)
            delta -= delta.mean()  # stay on the efficiency plane
            worse = subset_residual_loss(phi_star + 0.05 * delta, g, 0,
                                         bits[interior], weights[interior])
            assert worse > base

    def test_validation_tuples_cache_true_game_values(self, surrogate_model, splits):
        images = splits.val.images[:3]
        tuples = build_validation_tuples(surrogate_model, images, 4, RngState(5))
        assert len(tuples) == 3 * 4 * surrogate_model.config.num_classes
        t = tuples[0]
        g = ModelGame(surrogate_model, images[t.example_index])
        s = Subset(t.bits) if hasattr(t, "bits") else None
        assert s is not None
        assert t.value == pytest.approx(g.evaluate(s, t.class_index), abs=1e-15)

    def test_validation_tuple_rejects_trivial_subsets(self):
        with pytest.raises(UsageError):
            ValidationTuple(example_index=0, class_index=0,
                            bits=np.zeros(4, dtype=bool), value=0.0,
                            null_value=0.0, grand_value=1.0)
        with pytest.raises(UsageError):
            ValidationTuple(example_index=0, class_index=0,
                            bits=np.ones(4, dtype=bool), value=0.0,
                            null_value=0.0, grand_value=1.0)

    def test_validation_loss_matches_hand_computation(self, explainer_model, splits):
        images = splits.val.images[:4]
        tuples = build_validation_tuples(explainer_model.surrogate, images, 3,
                                         RngState(6))
        got = validation_loss(explainer_model, images, tuples)
        phi = explain_all(explainer_model, images)
        residuals = []
        for t in tuples:
            pred = phi[t.example_index, :, t.class_index][t.bits].sum()
            residuals.append((t.value - t.null_value - pred) ** 2)
        assert got == pytest.approx(np.mean(residuals), abs=1e-12)


class TestTrainingQuality:
    def test_tracks_exact_values_closely(self, explainer_model, splits):
        images = splits.test.images[:32]
        labels = splits.test.labels[:32]
        phi = explain_all(explainer_model, images)
        cors = []
        for i in range(32):
            g = ModelGame(explainer_model.surrogate, images[i])
            want = exact.shapley_enumeration(g, int(labels[i])).values
            got = phi[i, :, int(labels[i])]
            if want.std() > 0 and got.std() > 0:
                cors.append(np.corrcoef(got, want)[0, 1])
        assert np.mean(cors) > 0.9

    def test_training_beats_uniform_start(self, explainer_model, surrogate_model,
                                          splits):
        images = splits.val.images[:32]
        tuples = build_validation_tuples(surrogate_model, images, 8, RngState(7))
        fresh = init_explainer(surrogate_model, RngState(3))
        assert (validation_loss(explainer_model, images, tuples)
                < validation_loss(fresh, images, tuples))

    def test_config_validation(self):
        with pytest.raises(UsageError):
            ExplainerTrainConfig(epochs=1, subsets_per_example=7, paired=True)
        with pytest.raises(UsageError):
            ExplainerTrainConfig(epochs=-1)
        ExplainerTrainConfig(epochs=1, subsets_per_example=7, paired=False)

    def test_short_training_improves_validation(self, surrogate_model, splits):
        model = init_explainer(surrogate_model, RngState(8))
        cfg = ExplainerTrainConfig(epochs=1, batch_size=32, subsets_per_example=8,
                                   val_subsets_per_example=4)
        best, history = train_explainer(model, splits.train.images[:96],
                                        splits.val.images[:32], cfg,
                                        rng=RngState(9))
        assert len(history["val_loss"]) == 1
        assert history["val_loss"][0] < history["initial_val_loss"]


class TestCheckpoint:
    def test_roundtrip_preserves_outputs(self, explainer_model, splits, tmp_path):
        path = tmp_path / "explainer.shpk"
        save_explainer(path, explainer_model)
        back = load_explainer(path)
        images = splits.test.images[:8]
        assert np.array_equal(explain_all(back, images),
                              explain_all(explainer_model, images))
        assert back.use_tanh == explainer_model.use_tanh

    def test_loaded_model_is_self_contained(self, explainer_model, splits, tmp_path):
        # The file carries the frozen surrogate too, so explanations work
        # without any other artifact on disk.
        path = tmp_path / "explainer.shpk"
        save_explainer(path, explainer_model)
        back = load_explainer(path)
        assert np.array_equal(
            vit.infer_probs(back.surrogate, splits.test.images[:4]),
            vit.infer_probs(explainer_model.surrogate, splits.test.images[:4]))

    def test_wrong_kind_rejected(self, surrogate_model, tmp_path):
        path = tmp_path / "sur.shpk"
        vit.save_vit_checkpoint(path, surrogate_model, "surrogate", {})
        with pytest.raises(UsageError):
            load_explainer(path)
