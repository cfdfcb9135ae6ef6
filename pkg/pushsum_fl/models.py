from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from pushsum_fl.vecmath import ParamVector


@dataclass(slots=True)
class ClientState:
    client_id: int
    x: ParamVector
    w: float = 1.0
    last_loss: float = 0.0  # full-shard loss, read by neighbour selection

    @property
    def z(self) -> ParamVector:
        return self.x / self.w


@dataclass(frozen=True, slots=True)
class Message:
    """Payloads are pre-scaled by the sender's out-weight p_{to,from}."""

    sender: int
    receiver: int
    payload_x: ParamVector
    payload_w: float


@dataclass(slots=True)
class RoundMetrics:
    round: int
    train_loss: float
    test_loss: float
    test_accuracy: float
    grad_norm_sq: float
    consensus_error: float
    min_w: float
    max_w: float
    w_mass_residual: float = 0.0
    x_mass_residual: float = 0.0
    wall_ms: int = 0

    @classmethod
    def columns(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not math.isfinite(value):
                raise ValueError(f"round {self.round}: {f.name} is not finite")
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"round {self.round}: accuracy {self.test_accuracy} outside [0, 1]")


@dataclass(slots=True)
class RunManifest:
    config: dict[str, Any]
    seed: int
    code_version: str
    started_at: str
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True, slots=True)
class OracleReport:
    check_name: str
    passed: bool
    max_error: float
    witness: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        text = f"{verdict}  {self.check_name:<28} max_err={self.max_error:.3e}"
        return f"{text}  {self.witness}" if self.witness else text


def stack_x(states: list[ClientState]) -> np.ndarray:
    return np.stack([s.x for s in states])
