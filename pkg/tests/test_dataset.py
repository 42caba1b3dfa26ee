"""Planted-signal dataset: structure, determinism, learnability of the
planted ground truth, the localization score, and the binary file format."""

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from shapkit import dataset, vit
from shapkit.dataset import PlantedConfig, generate, hit_rate, load_dataset, save_dataset
from shapkit.errors import UsageError

from conftest import small_planted_config


class TestGeneration:
    def test_shapes_and_dtypes(self, planted_config, splits):
        cfg = planted_config
        for name, size in (("train", cfg.train_size), ("val", cfg.val_size),
                           ("test", cfg.test_size)):
            s = splits.split(name)
            assert s.images.shape == (size, cfg.image_height, cfg.image_width, cfg.channels)
            assert s.images.dtype == np.float64
            assert s.labels.shape == (size,)
            assert set(np.unique(s.labels)) <= set(range(cfg.num_classes))
            assert s.signal.shape == (size, cfg.signal_patches)
            assert (s.signal >= 0).all() and (s.signal < cfg.num_patches).all()

    def test_class_balance_exact(self, planted_config, splits):
        counts = np.bincount(splits.train.labels, minlength=planted_config.num_classes)
        assert (counts == planted_config.train_size // planted_config.num_classes).all()

    def test_signal_rows_sorted_unique(self, splits):
        sig = splits.test.signal
        assert (np.diff(sig, axis=1) > 0).all()

    def test_regeneration_bit_identical(self, planted_config, splits):
        again = generate(planted_config)
        for name in ("train", "val", "test"):
            a, b = splits.split(name), again.split(name)
            assert np.array_equal(a.images, b.images)
            assert np.array_equal(a.labels, b.labels)
            assert np.array_equal(a.signal, b.signal)

    def test_different_seed_different_data(self, planted_config, splits):
        other = generate(small_planted_config(seed=planted_config.seed + 1))
        assert not np.array_equal(other.train.images, splits.train.images)

    def test_planted_patches_carry_the_template(self, planted_config, splits):
        # Subtracting the class template from a planted patch should leave
        # roughly noise-level energy; non-planted patches keep full template
        # distance. Checked in aggregate over the test split.
        cfg = planted_config
        templates = dataset.class_templates(cfg)
        vcfg = dataset.default_vit_config(cfg)
        patches = vit.patchify(splits.test.images, vcfg)
        tpl_flat = templates.reshape(cfg.num_classes, -1)
        planted_res, other_res = [], []
        for i in range(64):
            y = splits.test.labels[i]
            sig = set(splits.test.signal[i].tolist())
            for p in range(cfg.num_patches):
                res = np.mean((patches[i, p] - tpl_flat[y]) ** 2)
                (planted_res if p in sig else other_res).append(res)
        assert np.mean(planted_res) < 0.5 * np.mean(other_res)

    def test_labels_learnable_from_signal_patches(self, planted_config, splits):
        # Independent oracle: logistic regression on template-correlation
        # features separates the classes almost perfectly.
        cfg = planted_config
        templates = dataset.class_templates(cfg).reshape(cfg.num_classes, -1)
        vcfg = dataset.default_vit_config(cfg)

        def features(images):
            patches = vit.patchify(images, vcfg)        # (n, d, pdim)
            corr = patches @ templates.T                 # (n, d, K)
            return corr.reshape(len(images), -1)

        clf = LogisticRegression(max_iter=2000)
        clf.fit(features(splits.train.images), splits.train.labels)
        acc = clf.score(features(splits.test.images), splits.test.labels)
        assert acc >= 0.95

    def test_config_validation(self):
        with pytest.raises(UsageError):
            small_planted_config(train_size=510)   # not class-balanced
        with pytest.raises(UsageError):
            small_planted_config(image_height=10)  # not divisible by patch
        with pytest.raises(UsageError):
            small_planted_config(signal_patches=9)  # more than patches exist
        with pytest.raises(UsageError):
            PlantedConfig(image_height=128, image_width=128, patch_size=4,
                          train_size=4, val_size=4, test_size=4)  # 1024 > 255


class TestHitRate:
    def test_perfect_and_zero(self):
        values = np.array([0.1, 0.9, 0.8, 0.0])
        assert hit_rate(values, np.array([1, 2]), top_k=2) == 1.0
        assert hit_rate(values, np.array([0, 3]), top_k=2) == 0.0

    def test_partial(self):
        values = np.array([0.9, 0.8, 0.1, 0.0])
        assert hit_rate(values, np.array([0, 2]), top_k=2) == 0.5

    def test_ties_break_to_lower_index(self):
        values = np.array([1.0, 1.0, 0.0])
        assert hit_rate(values, np.array([0]), top_k=1) == 1.0
        assert hit_rate(values, np.array([1]), top_k=1) == 0.0

    def test_denominator_is_min_of_k_and_signal(self):
        values = np.array([3.0, 2.0, 1.0, 0.0])
        # top_k=3 but only one planted patch: denominator 1.
        assert hit_rate(values, np.array([2]), top_k=3) == 1.0

    def test_k_out_of_range(self):
        with pytest.raises(UsageError):
            hit_rate(np.zeros(4), np.array([0]), top_k=5)


class TestDatasetFile:
    def test_roundtrip_bit_exact(self, tmp_path, splits):
        path = tmp_path / "data.shpd"
        save_dataset(path, splits)
        back = load_dataset(path)
        assert back.config == splits.config
        for name in ("train", "val", "test"):
            a, b = splits.split(name), back.split(name)
            assert np.array_equal(a.images, b.images)
            assert np.array_equal(a.labels, b.labels)
            assert np.array_equal(a.signal, b.signal)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.shpd"
        path.write_bytes(b"WRONG" + b"\x00" * 32)
        with pytest.raises(UsageError):
            load_dataset(path)

    def test_truncation_rejected(self, tmp_path, splits):
        path = tmp_path / "data.shpd"
        save_dataset(path, splits)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(UsageError):
            load_dataset(path)


class TestDefaultModelConfig:
    def test_geometry_copied(self, planted_config):
        vcfg = dataset.default_vit_config(planted_config)
        assert vcfg.image_height == planted_config.image_height
        assert vcfg.num_classes == planted_config.num_classes
        assert vcfg.num_patches == planted_config.num_patches

    def test_overrides_win(self, planted_config):
        vcfg = dataset.default_vit_config(planted_config, embed_dim=64, readout="gap")
        assert vcfg.embed_dim == 64 and vcfg.readout == "gap"
