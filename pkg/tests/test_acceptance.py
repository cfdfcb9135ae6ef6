"""Desk-scale reproductions of the headline trends (minutes; run with -m slow)."""

from __future__ import annotations

import numpy as np
import pytest

from pushsum_fl.experiment import ExperimentConfig, run_experiment

pytestmark = pytest.mark.slow

SEEDS = range(5)


def _blobs(**kw) -> ExperimentConfig:
    base = dict(
        n_clients=16,
        k_out=2,
        classes=10,
        per_class=100,
        features=20,
        dirichlet_alpha=0.3,
        model="logistic",
        rounds=100,
        local_iters=5,
        batch_size=32,
        eta_l0=0.1,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def _mean_accuracy(make, seeds=SEEDS) -> float:
    return float(np.mean([run_experiment(make(seed)).metrics[-1].test_accuracy for seed in seeds]))


def test_running_gradient_average_decays():
    for seed in range(3):
        result = run_experiment(_blobs(model="mlp", hidden=16, rounds=400, seed=seed))
        g = np.array([m.grad_norm_sq for m in result.metrics[1:]])
        running = [g[:T].mean() for T in (50, 100, 200, 400)]
        assert all(b <= a for a, b in zip(running, running[1:])), running


def test_ablation_ordering_on_mnist(mnist_dir):
    def make(algo):
        return lambda seed: ExperimentConfig(
            algorithm=algo,
            n_clients=16,
            k_out=2,
            data="idx",
            idx_dir=mnist_dir,
            limit=4000,
            test_limit=1000,
            dirichlet_alpha=0.3,
            rounds=100,
            local_iters=5,
            batch_size=32,
            seed=seed,
        )

    osgp = _mean_accuracy(make("OSGP"))
    osgp_m = _mean_accuracy(make("OSGP-M"))
    full = _mean_accuracy(make("DFedSGPSM"))
    assert osgp_m - osgp >= -0.003
    assert full - osgp_m >= -0.003
    assert full - osgp > 0


def test_milder_heterogeneity_does_not_hurt():
    skewed = _mean_accuracy(lambda seed: _blobs(dirichlet_alpha=0.3, seed=seed))
    milder = _mean_accuracy(lambda seed: _blobs(dirichlet_alpha=0.6, seed=seed))
    assert milder >= skewed - 0.005


def test_neighbor_selection_strategy_parity():
    plain = _mean_accuracy(lambda seed: _blobs(seed=seed))
    strategy = _mean_accuracy(lambda seed: _blobs(algorithm="DFedSGPSM-S", seed=seed))
    assert abs(strategy - plain) <= 0.015
