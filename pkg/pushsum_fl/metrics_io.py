"""
Round metrics: global evaluation of the averaged model, CSV persistence and
the run manifest.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence, TextIO

import numpy as np

from pushsum_fl import __version__
from pushsum_fl.errors import ManifestExistsError, MetricsOrderError, StorageError
from pushsum_fl.models import ClientState, RoundMetrics, RunManifest, stack_x
from pushsum_fl.objectives import LocalObjective
from pushsum_fl.paths import MANIFEST_NAME
from pushsum_fl.storage import load_json, save_json
from pushsum_fl.vecmath import ParamVector

logger = logging.getLogger(__name__)

_INT_COLUMNS = {"round", "wall_ms"}


@dataclass(frozen=True, slots=True)
class GlobalEvaluation:
    x_bar: ParamVector
    train_loss: float
    test_loss: float
    test_accuracy: float
    grad_norm_sq: float


def average_model(states: Sequence[ClientState]) -> ParamVector:
    """x_bar = mean of the raw x_i (not the de-biased z_i)."""
    return stack_x(list(states)).mean(axis=0)


def evaluate_global(
    states: Sequence[ClientState],
    test_objective: LocalObjective,
    objectives: Sequence[LocalObjective],
) -> GlobalEvaluation:
    if test_objective.n_samples == 0:
        raise ValueError("held-out set is empty")
    x_bar = average_model(states)
    grads = np.stack([obj.gradient(x_bar) for obj in objectives])
    mean_grad = grads.mean(axis=0)
    train_loss = float(np.mean([obj.evaluate(x_bar) for obj in objectives]))
    return GlobalEvaluation(
        x_bar=x_bar,
        train_loss=train_loss,
        test_loss=test_objective.evaluate(x_bar),
        test_accuracy=test_objective.accuracy(x_bar),
        grad_norm_sq=float(np.dot(mean_grad, mean_grad)),
    )


def per_client_accuracy(states: Sequence[ClientState], test_objective: LocalObjective) -> list[float]:
    return [test_objective.accuracy(s.z) for s in states]


# ======================================================================
# CSV
# ======================================================================


def _fmt(value: object) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


class MetricsSink:
    """One CSV row per round, header on first append, flushed every row."""

    def __init__(self, stream: TextIO) -> None:
        self._stream = stream
        self._writer = csv.writer(stream, lineterminator="\n")
        self._last_round: Optional[int] = None

    @classmethod
    def open(cls, path: Path) -> MetricsSink:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            return cls(path.open("w", encoding="utf-8", newline=""))
        except OSError as e:
            raise StorageError(path, str(e)) from e

    @property
    def last_round(self) -> Optional[int]:
        return self._last_round

    def append(self, m: RoundMetrics) -> None:
        expected = 0 if self._last_round is None else self._last_round + 1
        if m.round != expected:
            raise MetricsOrderError(expected, m.round)
        m.validate()
        try:
            if self._last_round is None:
                self._writer.writerow(RoundMetrics.columns())
            self._writer.writerow([_fmt(v) for v in asdict(m).values()])
            self._stream.flush()
        except OSError as e:
            raise StorageError(Path(getattr(self._stream, "name", "<stream>")), str(e)) from e
        self._last_round = m.round

    def close(self) -> None:
        self._stream.close()

    def __enter__(self) -> MetricsSink:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def append_metrics(sink: MetricsSink, m: RoundMetrics) -> None:
    sink.append(m)


def parse_metrics(text: str) -> list[RoundMetrics]:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        out.append(
            RoundMetrics(
                **{k: int(v) if k in _INT_COLUMNS else float(v) for k, v in row.items()}
            )
        )
    return out


def load_metrics(path: Path) -> list[RoundMetrics]:
    return parse_metrics(path.read_text(encoding="utf-8"))


def metrics_to_csv(rows: Sequence[RoundMetrics]) -> str:
    buf = io.StringIO()
    sink = MetricsSink(buf)
    for m in rows:
        sink.append(m)
    return buf.getvalue()


# ======================================================================
# MANIFEST
# ======================================================================


def new_manifest(config: dict, seed: int, **extra: object) -> RunManifest:
    return RunManifest(
        config=config,
        seed=int(seed),
        code_version=__version__,
        started_at=datetime.now(timezone.utc).isoformat(),
        extra=dict(extra),
    )


def write_manifest(run_dir: Path, manifest: RunManifest) -> Path:
    path = run_dir / MANIFEST_NAME
    if path.exists():
        raise ManifestExistsError(f"{path} already exists; one manifest per run directory")
    save_json(path, asdict(manifest))
    logger.debug("manifest written to %s", path)
    return path


def read_manifest(run_dir: Path) -> Optional[RunManifest]:
    data = load_json(run_dir / MANIFEST_NAME, None)
    if data is None:
        return None
    return RunManifest(**data)
