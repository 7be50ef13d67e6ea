"""Shared fixtures: one small trained model and its watermark wrap, reused
across test modules to keep the suite fast."""

import pytest

from neurht.datagen import gen_blobs, gen_composite_watermarks, left_half_mask
from neurht.honeytrace import ProtectedModel, ProtectionParams
from neurht.nn import Mlp, TrainConfig, train
from neurht.numerics import RandomSource


@pytest.fixture(scope="session")
def small_task():
    """A quickly-trained 4-class model with train/test/holdout splits."""
    train_data = gen_blobs(4, 64, 120, 0.3, seed=901, split="train")
    test_data = gen_blobs(4, 64, 40, 0.3, seed=901, split="test")
    holdout = gen_blobs(4, 64, 30, 0.3, seed=901, split="holdout")
    model = Mlp.initialize([64, 48, 32, 4], RandomSource(17, "fixture-init"))
    config = TrainConfig(
        epochs=40, batch_size=32, learning_rate=0.05, momentum=0.9,
        lr_decay_step=10, lr_decay_factor=0.7, seed=23,
    )
    model, _ = train(model, train_data.inputs, train_data.labels, config)
    return {"model": model, "train": train_data, "test": test_data, "holdout": holdout}


@pytest.fixture(scope="session")
def wrapped(small_task):
    wm = gen_composite_watermarks(
        small_task["train"], 0, 1, left_half_mask(64), 6, seed=55, target=2
    )
    pm = ProtectedModel(
        small_task["model"],
        wm,
        ProtectionParams(margin_d=1.0),
        small_task["train"],
        RandomSource(77, "fixture-protect"),
    )
    return {"pm": pm, "wm": wm, **small_task}
