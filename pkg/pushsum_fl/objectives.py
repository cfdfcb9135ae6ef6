"""
Differentiable local objectives F_i(x; xi) with analytic minibatch gradients.

A model is a stateless parameterisation (quadratic, softmax logistic
regression, one-hidden-layer tanh MLP). A LocalObjective binds a model to a
client's shard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional, Protocol

import numpy as np
import numpy.typing as npt

from pushsum_fl.errors import DimensionMismatchError, EmptyBatchError, NonFiniteError
from pushsum_fl.vecmath import ParamVector, SeededRng, Stream

ModelKind = Literal["quadratic", "logistic", "mlp"]


class Model(Protocol):
    kind: ModelKind
    dim: int

    def loss(self, x: ParamVector, X: np.ndarray, y: np.ndarray) -> float: ...

    def grad(self, x: ParamVector, X: np.ndarray, y: np.ndarray) -> ParamVector: ...

    def predict(self, x: ParamVector, X: np.ndarray) -> Optional[np.ndarray]: ...

    def init(self, rng: SeededRng) -> ParamVector: ...


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _xent_and_delta(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and d(loss)/d(logits)."""
    logp = _log_softmax(logits)
    rows = np.arange(y.size)
    loss = -float(logp[rows, y].mean())
    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta /= y.size
    return loss, delta


# ======================================================================
# MODELS
# ======================================================================


@dataclass(frozen=True, slots=True)
class QuadraticModel:
    """F(x; c) = 1/2 ||x - c||^2, each feature row is a centre c."""

    n_features: int
    kind: ModelKind = "quadratic"

    @property
    def dim(self) -> int:
        return self.n_features

    def loss(self, x: ParamVector, X: np.ndarray, y: np.ndarray) -> float:
        diff = x[None, :] - X
        return float(0.5 * np.mean(np.sum(diff * diff, axis=1)))

    def grad(self, x: ParamVector, X: np.ndarray, y: np.ndarray) -> ParamVector:
        return np.mean(x[None, :] - X, axis=0)

    def predict(self, x: ParamVector, X: np.ndarray) -> Optional[np.ndarray]:
        return None

    def init(self, rng: SeededRng) -> ParamVector:
        return np.zeros(self.n_features)


@dataclass(frozen=True, slots=True)
class LogisticModel:
    """Softmax regression; the bias is an appended constant-1 feature."""

    n_features: int
    n_classes: int
    kind: ModelKind = "logistic"

    @property
    def dim(self) -> int:
        return self.n_classes * (self.n_features + 1)

    def _weights(self, x: ParamVector) -> np.ndarray:
        return x.reshape(self.n_classes, self.n_features + 1)

    @staticmethod
    def _with_bias(X: np.ndarray) -> np.ndarray:
        return np.hstack([X, np.ones((X.shape[0], 1))])

    def loss(self, x: ParamVector, X: np.ndarray, y: np.ndarray) -> float:
        logits = self._with_bias(X) @ self._weights(x).T
        return _xent_and_delta(logits, y)[0]

    def grad(self, x: ParamVector, X: np.ndarray, y: np.ndarray) -> ParamVector:
        Xb = self._with_bias(X)
        _, delta = _xent_and_delta(Xb @ self._weights(x).T, y)
        return (delta.T @ Xb).reshape(-1)

    def predict(self, x: ParamVector, X: np.ndarray) -> Optional[np.ndarray]:
        return np.argmax(self._with_bias(X) @ self._weights(x).T, axis=1)

    def init(self, rng: SeededRng) -> ParamVector:
        return np.zeros(self.dim)


@dataclass(frozen=True, slots=True)
class MLPModel:
    """
    One hidden tanh layer, softmax output.
    Layout: W1 (h x d), b1 (h), W2 (C x h), b2 (C), row-major.
    """

    n_features: int
    hidden: int
    n_classes: int
    kind: ModelKind = "mlp"

    @property
    def dim(self) -> int:
        d, h, c = self.n_features, self.hidden, self.n_classes
        return h * d + h + c * h + c

    def _unpack(self, x: ParamVector) -> tuple[np.ndarray, ...]:
        d, h, c = self.n_features, self.hidden, self.n_classes
        i = 0
        W1 = x[i : i + h * d].reshape(h, d)
        i += h * d
        b1 = x[i : i + h]
        i += h
        W2 = x[i : i + c * h].reshape(c, h)
        i += c * h
        b2 = x[i : i + c]
        return W1, b1, W2, b2

    def _forward(self, x: ParamVector, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        W1, b1, W2, b2 = self._unpack(x)
        hdn = np.tanh(X @ W1.T + b1)
        return hdn, hdn @ W2.T + b2

    def loss(self, x: ParamVector, X: np.ndarray, y: np.ndarray) -> float:
        _, logits = self._forward(x, X)
        return _xent_and_delta(logits, y)[0]

    def grad(self, x: ParamVector, X: np.ndarray, y: np.ndarray) -> ParamVector:
        _, _, W2, _ = self._unpack(x)
        hdn, logits = self._forward(x, X)
        _, delta = _xent_and_delta(logits, y)
        gW2 = delta.T @ hdn
        gb2 = delta.sum(axis=0)
        da = (delta @ W2) * (1.0 - hdn * hdn)
        gW1 = da.T @ X
        gb1 = da.sum(axis=0)
        return np.concatenate([gW1.reshape(-1), gb1, gW2.reshape(-1), gb2])

    def predict(self, x: ParamVector, X: np.ndarray) -> Optional[np.ndarray]:
        return np.argmax(self._forward(x, X)[1], axis=1)

    def init(self, rng: SeededRng) -> ParamVector:
        # client-0 stream; every client starts from this same vector
        gen = rng.stream(Stream.INIT, client=0)
        d, h, c = self.n_features, self.hidden, self.n_classes
        lim1 = 1.0 / math.sqrt(d)
        lim2 = 1.0 / math.sqrt(h)
        return np.concatenate(
            [
                gen.uniform(-lim1, lim1, size=h * d + h),
                gen.uniform(-lim2, lim2, size=c * h + c),
            ]
        )


def build_model(kind: ModelKind, n_features: int, n_classes: int, hidden: int = 16) -> Model:
    if kind == "quadratic":
        return QuadraticModel(n_features)
    if kind == "logistic":
        return LogisticModel(n_features, n_classes)
    if kind == "mlp":
        return MLPModel(n_features, hidden, n_classes)
    raise ValueError(f"unknown model kind: {kind}")


# ======================================================================
# MINIBATCHES
# ======================================================================


@dataclass(frozen=True, slots=True)
class Minibatch:
    indices: npt.NDArray[np.int64]

    @property
    def size(self) -> int:
        return int(self.indices.size)


class MinibatchSampler:
    """
    Uniform sampling without replacement within an epoch pass. Epoch e of
    (client, round) is shuffled by its own keyed stream, so iteration k's batch
    depends only on (seed, client, round, k).
    """

    def __init__(
        self,
        n_samples: int,
        batch_size: int,
        rng: SeededRng,
        *,
        client: int,
        round_idx: int,
    ) -> None:
        if n_samples < 1:
            raise EmptyBatchError("cannot sample from an empty shard")
        self.n_samples = n_samples
        self.batch_size = max(1, min(batch_size, n_samples))
        self.per_epoch = math.ceil(n_samples / self.batch_size)
        self._rng = rng
        self._client = client
        self._round = round_idx
        self._epoch = -1
        self._perm: np.ndarray = np.arange(n_samples)

    def batch(self, k: int) -> Minibatch:
        epoch, j = divmod(k, self.per_epoch)
        if epoch != self._epoch:
            gen = self._rng.stream(Stream.MINIBATCH, self._client, self._round, epoch)
            self._perm = gen.permutation(self.n_samples)
            self._epoch = epoch
        b = self.batch_size
        return Minibatch(indices=self._perm[j * b : (j + 1) * b].astype(np.int64))


# ======================================================================
# LOCAL OBJECTIVE
# ======================================================================


@dataclass(frozen=True, slots=True)
class LocalObjective:
    model: Model
    features: np.ndarray
    labels: np.ndarray
    client_id: int = 0

    @property
    def kind(self) -> ModelKind:
        return self.model.kind

    @property
    def params_dim(self) -> int:
        return self.model.dim

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    def _select(self, x: ParamVector, batch: Optional[Minibatch]) -> tuple[np.ndarray, np.ndarray]:
        if x.shape != (self.model.dim,):
            raise DimensionMismatchError(x.size, self.model.dim, "parameter")
        if batch is None:
            if self.n_samples == 0:
                raise EmptyBatchError(f"client {self.client_id} has an empty shard")
            return self.features, self.labels
        if batch.size == 0:
            raise EmptyBatchError("empty minibatch")
        if batch.indices.min() < 0 or batch.indices.max() >= self.n_samples:
            raise IndexError(f"minibatch index outside shard of {self.n_samples} samples")
        return self.features[batch.indices], self.labels[batch.indices]

    def evaluate(self, x: ParamVector, batch: Optional[Minibatch] = None) -> float:
        """Mean loss over the batch, or the full shard when batch is None."""
        X, y = self._select(x, batch)
        return self.model.loss(x, X, y)

    def gradient(self, x: ParamVector, batch: Optional[Minibatch] = None) -> ParamVector:
        X, y = self._select(x, batch)
        g = self.model.grad(x, X, y)
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            raise NonFiniteError(f"gradient of client {self.client_id}", int(bad[0]))
        return g

    def accuracy(self, x: ParamVector) -> float:
        if self.n_samples == 0:
            return 0.0
        pred = self.model.predict(x, self.features)
        if pred is None:
            return 0.0
        return float(np.mean(pred == self.labels))


def objectives_for(
    model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    shards: tuple[np.ndarray, ...],
) -> list[LocalObjective]:
    return [
        LocalObjective(model=model, features=features[s], labels=labels[s], client_id=i)
        for i, s in enumerate(shards)
    ]
