from __future__ import annotations

import os
from pathlib import Path

import pytest

from pushsum_fl.data import make_synthetic
from pushsum_fl.objectives import LocalObjective, build_model
from pushsum_fl.vecmath import SeededRng


@pytest.fixture
def rng() -> SeededRng:
    return SeededRng(0)


@pytest.fixture
def small_run() -> dict:
    """Keyword arguments for a seconds-long ExperimentConfig."""
    return dict(
        n_clients=6,
        k_out=2,
        rounds=8,
        classes=3,
        per_class=20,
        features=4,
        local_iters=2,
        batch_size=8,
        seed=0,
    )


@pytest.fixture
def logistic_objective(rng: SeededRng) -> LocalObjective:
    train, _ = make_synthetic(3, 10, 4, 3.0, rng)
    model = build_model("logistic", train.n_features, train.n_classes)
    return LocalObjective(model=model, features=train.features, labels=train.labels)


@pytest.fixture
def mnist_dir() -> Path:
    raw = os.environ.get("PUSHSUM_FL_MNIST_DIR", "").strip()
    if not raw:
        pytest.skip("PUSHSUM_FL_MNIST_DIR not set")
    return Path(raw)
