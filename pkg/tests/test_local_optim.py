from __future__ import annotations

from typing import Optional

import numpy as np
import pytest

from pushsum_fl.errors import ProtocolCorruptionError
from pushsum_fl.local_optim import (
    LocalHyper,
    debias,
    decayed_lr,
    iterations_for,
    local_round,
    sam_gradient,
    sam_step,
)
from pushsum_fl.objectives import LocalObjective, Minibatch, build_model
from pushsum_fl.vecmath import ParamVector, SeededRng
from pushsum_fl.verify import momentum_closed_form_oracle


class FrozenGradients:
    """Returns the k-th preset gradient on the k-th call, whatever the point."""

    def __init__(self, grads: list[np.ndarray], n_samples: int = 4) -> None:
        self._grads = list(grads)
        self._n = n_samples

    @property
    def n_samples(self) -> int:
        return self._n

    def gradient(self, x: ParamVector, batch: Optional[Minibatch] = None) -> ParamVector:
        return self._grads.pop(0)


def _half_square() -> LocalObjective:
    # 1-D f(x) = 1/2 x^2 (quadratic with centre 0)
    return LocalObjective(build_model("quadratic", 1, 1), np.zeros((1, 1)), np.zeros(1, dtype=np.int64))


def test_debias_examples():
    np.testing.assert_array_equal(debias(np.array([2.0, 4.0]), 1.0), [2.0, 4.0])
    np.testing.assert_array_equal(debias(np.array([2.0, 4.0]), 2.0), [1.0, 2.0])
    np.testing.assert_allclose(debias(np.array([5 / 6 * 3, 0.0]), 5 / 6), [3.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("w", [0.0, -1.0, float("nan"), float("inf")])
def test_debias_rejects_bad_weight(w):
    with pytest.raises(ProtocolCorruptionError):
        debias(np.ones(2), w)


def test_sam_rho_zero_is_plain_gradient(logistic_objective):
    z = np.full(logistic_objective.params_dim, 0.2)
    batch = Minibatch(np.array([1, 2, 5], dtype=np.int64))
    np.testing.assert_array_equal(
        sam_gradient(logistic_objective, z, batch, 0.0), logistic_objective.gradient(z, batch)
    )


def test_sam_closed_form_on_half_square():
    step = sam_step(_half_square(), np.array([1.0]), Minibatch(np.array([0])), 0.1)
    assert step.g1[0] == 1.0
    assert step.z_breve[0] == pytest.approx(1.1)
    assert step.g[0] == pytest.approx(1.1)


def test_sam_at_stationary_point_returns_zero():
    g = sam_gradient(_half_square(), np.array([0.0]), Minibatch(np.array([0])), 0.5)
    np.testing.assert_array_equal(g, [0.0])


@pytest.mark.parametrize("rho", [0.01, 0.05, 0.3])
def test_sam_perturbation_has_length_rho(logistic_objective, rho):
    gen = np.random.default_rng(11)
    batch = Minibatch(np.array([0, 2, 3], dtype=np.int64))
    for _ in range(10):
        z = gen.normal(scale=0.3, size=logistic_objective.params_dim)
        step = sam_step(logistic_objective, z, batch, rho)
        assert np.linalg.norm(step.z_breve - z) == pytest.approx(rho, rel=1e-12)


def test_sam_uses_same_batch_for_both_gradients(logistic_objective):
    batch = Minibatch(np.array([0, 4], dtype=np.int64))
    step = sam_step(logistic_objective, np.full(logistic_objective.params_dim, 0.1), batch, 0.2)
    np.testing.assert_array_equal(step.batch.indices, batch.indices)
    np.testing.assert_array_equal(step.g, logistic_objective.gradient(step.z_breve, batch))


def test_one_step_sgd_reduction(logistic_objective):
    x_in = np.full(logistic_objective.params_dim, 0.05)
    hyper = LocalHyper(eta_l=0.3, K=1, batch_size=logistic_objective.n_samples)
    x_out, _ = local_round(logistic_objective, x_in, 1.0, hyper, SeededRng(0))
    np.testing.assert_allclose(x_out, x_in - 0.3 * logistic_objective.gradient(x_in), atol=1e-12)


def test_two_steps_with_frozen_gradients():
    g1, g2 = np.array([1.0, -2.0]), np.array([0.5, 4.0])
    x_in = np.array([3.0, 3.0])
    hyper = LocalHyper(eta_l=0.1, alpha=0.5, K=2)
    x_out, _ = local_round(FrozenGradients([g1, g2]), x_in, 1.0, hyper, SeededRng(0))
    np.testing.assert_allclose(x_out - x_in, -0.1 * (1.5 * g1 + g2), atol=1e-12)


@pytest.mark.parametrize("K, alpha, rho, w", [(1, 0.0, 0.0, 1.0), (3, 0.9, 0.1, 0.7), (8, 0.5, 0.25, 1.6)])
def test_trace_replays_closed_form(logistic_objective, K, alpha, rho, w):
    x_in = np.random.default_rng(K).normal(scale=0.3, size=logistic_objective.params_dim)
    hyper = LocalHyper(eta_l=0.05, rho=rho, alpha=alpha, K=K, batch_size=4)
    x_out, trace = local_round(logistic_objective, x_in, w, hyper, SeededRng(2), record_trace=True)
    assert trace is not None and len(trace) == K
    expected = momentum_closed_form_oracle(trace, 0.05, alpha, K)
    assert np.linalg.norm(x_out - x_in - expected) <= 1e-10 * np.linalg.norm(expected)


def test_trace_steps_are_de_biased(logistic_objective):
    x_in = np.full(logistic_objective.params_dim, 0.4)
    hyper = LocalHyper(eta_l=0.1, K=2)
    _, trace = local_round(logistic_objective, x_in, 2.0, hyper, SeededRng(0), record_trace=True)
    np.testing.assert_array_equal(trace.steps[0].z, x_in / 2.0)


def test_local_round_is_keyed_by_client_and_round(logistic_objective):
    x_in = np.full(logistic_objective.params_dim, 0.1)
    hyper = LocalHyper(eta_l=0.1, K=3, batch_size=4)
    a, _ = local_round(logistic_objective, x_in, 1.0, hyper, SeededRng(0), client=1, round_idx=4)
    b, _ = local_round(logistic_objective, x_in, 1.0, hyper, SeededRng(0), client=1, round_idx=4)
    c, _ = local_round(logistic_objective, x_in, 1.0, hyper, SeededRng(0), client=2, round_idx=4)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_hyper_validation():
    with pytest.raises(ValueError):
        LocalHyper(eta_l=0.1, alpha=1.0)
    with pytest.raises(ValueError):
        LocalHyper(eta_l=0.1, K=0)
    with pytest.raises(ValueError):
        LocalHyper(eta_l=0.1, rho=-0.1)
    LocalHyper(eta_l=0.0)


def test_schedule_helpers():
    assert decayed_lr(0.1, 0, 0.998) == 0.1
    assert decayed_lr(0.1, 2, 0.5) == pytest.approx(0.025)
    assert iterations_for(100, 32, 5) == 20
    assert iterations_for(3, 128, 1) == 1


def test_local_round_descends_on_strongly_convex_quadratic():
    centres = np.array([[1.0, -1.0, 0.0], [2.0, 0.5, -1.5], [-0.5, 1.0, 1.0], [0.0, 0.0, 3.0]])
    obj = LocalObjective(build_model("quadratic", 3, 1), centres, np.zeros(4, dtype=np.int64))
    hyper = LocalHyper(eta_l=0.01, rho=0.05, alpha=0.9, K=5, batch_size=obj.n_samples)
    gen = np.random.default_rng(5)
    for start in range(20):
        x_in = gen.normal(scale=3.0, size=3)
        x_out, _ = local_round(obj, x_in, 1.0, hyper, SeededRng(start))
        assert obj.evaluate(x_out) <= obj.evaluate(x_in)
