"""Shared fixtures: one small planted dataset and one trained model stack.

Everything is seeded, so every fixture is bit-reproducible across runs. The
stack (classifier -> masking-distilled surrogate -> explainer) is trained once
per session and shared by the module tests and the acceptance suite; at this
scale the whole build takes well under a minute.
"""

import numpy as np
import pytest

from shapkit import dataset, explainer, surrogate, vit
from shapkit.tensorkit import RngState

STACK_SEED = 20260814

# one verdict line per acceptance check, echoed after the run summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance verdicts")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_planted_config(**overrides):
    base = dict(image_height=8, image_width=16, channels=1, patch_size=4,
                num_classes=4, signal_patches=2, amplitude=2.0, noise=0.5,
                train_size=512, val_size=128, test_size=256, seed=STACK_SEED)
    base.update(overrides)
    return dataset.PlantedConfig(**base)


@pytest.fixture(scope="session")
def planted_config():
    # 2 x 4 patch grid: 8 patches, small enough for exact enumeration.
    return small_planted_config()


@pytest.fixture(scope="session")
def splits(planted_config):
    return dataset.generate(planted_config)


@pytest.fixture(scope="session")
def vit_config(planted_config):
    return dataset.default_vit_config(planted_config)


@pytest.fixture(scope="session")
def classifier(splits, vit_config):
    """Full-input classifier; never sees masked inputs during training."""
    sched = vit.TrainSchedule(epochs=8, batch_size=32, lr=2e-3, weight_decay=0.01)
    weights, history = vit.train_classifier(
        splits.train.images, splits.train.labels,
        splits.val.images, splits.val.labels,
        vit_config, sched, masking="none", rng=RngState(1))
    assert history["val_accuracy"][-1] >= 0.9
    return weights


@pytest.fixture(scope="session")
def surrogate_model(classifier, splits):
    """Classifier fine-tuned to match its own full-input output under masking."""
    sched = vit.TrainSchedule(epochs=8, batch_size=32, lr=1e-3, weight_decay=0.01)
    student, _ = surrogate.finetune_surrogate(
        classifier, splits.train.images, splits.val.images, sched, rng=RngState(2))
    return student


@pytest.fixture(scope="session")
def explainer_model(surrogate_model, splits):
    model = explainer.init_explainer(surrogate_model, RngState(3),
                                     init_from="surrogate", use_tanh=True)
    cfg = explainer.ExplainerTrainConfig(epochs=10, batch_size=32,
                                         subsets_per_example=16, paired=True,
                                         lr=1e-3, weight_decay=0.0,
                                         val_subsets_per_example=8)
    best, history = explainer.train_explainer(
        model, splits.train.images, splits.val.images, cfg, rng=RngState(4))
    assert history["val_loss"][-1] < history["initial_val_loss"]
    return best
