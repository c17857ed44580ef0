"""Small fixtures shared by the strategy tests."""

from __future__ import annotations

import numpy as np

from cirsim.nn_core import TrainConfig, make_synthetic_dataset
from cirsim.strategies import ExperienceView, NetSpec

FAST_TRAIN = TrainConfig(learning_rate=0.05, epochs=5, batch_size=16, augmentation_strength=0.0)
SMALL_NET = NetSpec(hidden=(16,), projection_dim=8)


def easy_dataset(n_classes=6, input_dim=6, per_class=30, seed=0):
    """Well separated single-mode classes: a small net learns them in a few epochs."""
    return make_synthetic_dataset(
        n_classes=n_classes, input_dim=input_dim, train_per_class=per_class, test_per_class=20,
        class_separation=3.0, spread=0.5, modes=1, mode_spread=0.0, seed=seed,
    )


def view(ds, index, classes, ids=None):
    ids = tuple(range(ds.samples_per_class)) if ids is None else tuple(ids)
    x, y = ds.gather({c: ids for c in classes})
    return ExperienceView(index, tuple(classes), x, y)


def run_views(strategy, ds, class_groups):
    for t, classes in enumerate(class_groups, start=1):
        v = view(ds, t, classes)
        strategy.train_experience(v)
        v.close()
    return strategy


def class_accuracy(strategy, ds, classes):
    mask = np.isin(ds.test_y, list(classes))
    return float(np.mean(strategy.predict(ds.test_x[mask]) == ds.test_y[mask]))


def snapshot(params):
    return {k: v.copy() for k, v in params.items()}
