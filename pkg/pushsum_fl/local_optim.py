"""
The K-iteration client update: de-bias, SAM two-gradient step, momentum,
descent. Momentum restarts from zero every round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from pushsum_fl.config import LR_DECAY, SAM_EPS
from pushsum_fl.errors import NonFiniteError, ProtocolCorruptionError
from pushsum_fl.objectives import Minibatch, MinibatchSampler
from pushsum_fl.vecmath import ParamVector, SeededRng, check_finite, l2_norm


class Differentiable(Protocol):
    @property
    def n_samples(self) -> int: ...

    def gradient(self, x: ParamVector, batch: Optional[Minibatch] = None) -> ParamVector: ...


@dataclass(frozen=True, slots=True)
class LocalHyper:
    """eta_l may be 0 (pure mixing); the experiment layer requires it positive."""

    eta_l: float
    rho: float = 0.0
    alpha: float = 0.0
    K: int = 1
    batch_size: int = 32

    def __post_init__(self) -> None:
        if not (math.isfinite(self.eta_l) and self.eta_l >= 0):
            raise ValueError(f"eta_l must be non-negative, got {self.eta_l}")
        if not self.rho >= 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")
        if not 0 <= self.alpha < 1:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.K < 1:
            raise ValueError(f"K must be at least 1, got {self.K}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")


@dataclass(frozen=True, slots=True)
class TraceStep:
    z: ParamVector
    z_breve: ParamVector
    g1: ParamVector
    g: ParamVector
    v: ParamVector
    x: ParamVector
    batch_indices: np.ndarray
    perturbed_batch_indices: np.ndarray


@dataclass(slots=True)
class LocalTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def gradients(self) -> list[ParamVector]:
        return [s.g for s in self.steps]


@dataclass(frozen=True, slots=True)
class SamStep:
    g: ParamVector
    g1: ParamVector
    z_breve: ParamVector
    batch: Minibatch


def decayed_lr(eta0: float, t: int, decay: float = LR_DECAY) -> float:
    return eta0 * decay**t


def iterations_for(n_samples: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n_samples / max(1, min(batch_size, n_samples)))


def debias(x: ParamVector, w: float) -> ParamVector:
    if not (math.isfinite(w) and w > 0):
        raise ProtocolCorruptionError(f"push-sum weight must be positive and finite, got {w}")
    return x / w


def sam_step(obj: Differentiable, z: ParamVector, batch: Minibatch, rho: float) -> SamStep:
    """Both gradients are taken on the same minibatch."""
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    g1 = obj.gradient(z, batch)
    check_finite(g1, "first SAM gradient")
    norm = l2_norm(g1)
    if rho == 0 or norm <= SAM_EPS:
        return SamStep(g=g1, g1=g1, z_breve=z, batch=batch)
    z_breve = z + (rho / norm) * g1
    g = obj.gradient(z_breve, batch)
    check_finite(g, "perturbed SAM gradient")
    return SamStep(g=g, g1=g1, z_breve=z_breve, batch=batch)


def sam_gradient(obj: Differentiable, z: ParamVector, batch: Minibatch, rho: float) -> ParamVector:
    return sam_step(obj, z, batch, rho).g


def local_round(
    obj: Differentiable,
    x_in: ParamVector,
    w: float,
    hyper: LocalHyper,
    rng: SeededRng,
    *,
    client: int = 0,
    round_idx: int = 0,
    record_trace: bool = False,
) -> tuple[ParamVector, Optional[LocalTrace]]:
    """
    for k in 0..K-1:
        z = x / w; g = SAM gradient at z; v = alpha v + g; x = x - eta_l v
    Returns x^{t+1/2} and, when requested, the per-iteration trace.
    """
    sampler = MinibatchSampler(
        obj.n_samples, hyper.batch_size, rng, client=client, round_idx=round_idx
    )
    trace = LocalTrace() if record_trace else None
    x = np.array(x_in, dtype=np.float64)
    v = np.zeros_like(x)

    for k in range(hyper.K):
        z = debias(x, w)
        batch = sampler.batch(k)
        step = sam_step(obj, z, batch, hyper.rho)
        v = hyper.alpha * v + step.g
        x = x - hyper.eta_l * v
        if trace is not None:
            trace.steps.append(
                TraceStep(
                    z=z,
                    z_breve=step.z_breve,
                    g1=step.g1,
                    g=step.g,
                    v=v,
                    x=x,
                    batch_indices=batch.indices,
                    perturbed_batch_indices=step.batch.indices,
                )
            )

    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        raise NonFiniteError(f"local model of client {client}", int(bad[0]))
    return x, trace
