"""
Parameter-vector arithmetic, keyed random streams and the finite-difference
gradient oracle.

A ParamVector is a 1-D float64 numpy array. Public operations never mutate
their inputs and always return finite vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Iterable

import numpy as np
import numpy.typing as npt

from pushsum_fl.config import FD_STEP
from pushsum_fl.errors import DimensionMismatchError, NonFiniteError

ParamVector = npt.NDArray[np.float64]


def as_param_vector(values: Iterable[float] | npt.ArrayLike) -> ParamVector:
    x = np.array(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("ParamVector must have positive dimension")
    check_finite(x, "ParamVector")
    return x


def check_finite(x: np.ndarray, where: str) -> None:
    bad = np.flatnonzero(~np.isfinite(x))
    if bad.size:
        raise NonFiniteError(where, int(bad[0]))


def check_same_dim(x: ParamVector, y: ParamVector) -> None:
    if x.shape != y.shape:
        raise DimensionMismatchError(x.size, y.size)


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    check_same_dim(x, y)
    out = float(a) * x + y
    check_finite(out, "axpy")
    return out


def dot(x: ParamVector, y: ParamVector) -> float:
    check_same_dim(x, y)
    return float(np.dot(x, y))


def l2_norm(x: ParamVector) -> float:
    # sqrt of the dot product so that l2_norm(x)**2 tracks dot(x, x)
    return math.sqrt(float(np.dot(x, x)))


def finite_diff_grad(
    f: Callable[[ParamVector], float],
    x: ParamVector,
    h: float = FD_STEP,
) -> ParamVector:
    """Central differences (f(x + h e_k) - f(x - h e_k)) / 2h per coordinate."""
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    shifted = x.copy()
    for k in range(x.size):
        shifted[k] = x[k] + h
        f_plus = float(f(shifted))
        shifted[k] = x[k] - h
        f_minus = float(f(shifted))
        shifted[k] = x[k]
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError("finite_diff_grad objective", k)
        grad[k] = (f_plus - f_minus) / (2.0 * h)
    return grad


# ======================================================================
# KEYED RANDOM STREAMS
# ======================================================================


class Stream(IntEnum):
    INIT = 0
    DATA = 1
    PARTITION = 2
    TOPOLOGY = 3
    MINIBATCH = 4
    SERVER = 5
    ORACLE = 6


@dataclass(frozen=True, slots=True)
class SeededRng:
    """
    Factory of independent numpy generators keyed by
    (purpose, client, round, iteration).

    The same key always yields the same draw sequence, whatever order the
    streams are requested in.
    """

    seed: int

    def stream(
        self,
        purpose: Stream,
        client: int = 0,
        round_idx: int = 0,
        iteration: int = 0,
    ) -> np.random.Generator:
        key = (int(purpose), int(client), int(round_idx), int(iteration))
        if min(key) < 0:
            raise ValueError(f"stream key must be non-negative, got {key}")
        seq = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=key)
        return np.random.default_rng(seq)
