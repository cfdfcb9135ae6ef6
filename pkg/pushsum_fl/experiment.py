"""
Experiment driver: validated config -> data, partition, objectives, topology
schedule -> T rounds of run_round with metrics after every round.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from pushsum_fl.config import GLOBAL_LR, LR_DECAY, PARTICIPATION
from pushsum_fl.data import (
    Dataset,
    Partition,
    dirichlet_partition,
    load_idx,
    make_quadratic,
    make_synthetic,
    mean_label_entropy,
)
from pushsum_fl.errors import InvariantViolationError
from pushsum_fl.local_optim import LocalHyper, decayed_lr, iterations_for
from pushsum_fl.metrics_io import (
    MetricsSink,
    evaluate_global,
    new_manifest,
    per_client_accuracy,
    write_manifest,
)
from pushsum_fl.models import ClientState, RoundMetrics, RunManifest
from pushsum_fl.objectives import LocalObjective, Model, ModelKind, build_model, objectives_for
from pushsum_fl.paths import METRICS_NAME, SWEEP_SUMMARY_NAME
from pushsum_fl.protocol import AlgorithmKind, consensus_error, profile_for, run_round
from pushsum_fl.storage import load_json
from pushsum_fl.topology import (
    K_OUT_GENERATORS,
    ConnectivityVerdict,
    DiGraphRound,
    ScheduleKind,
    TopologyGenerator,
    TopologySchedule,
    check_B_connectivity,
    max_column_residual,
)
from pushsum_fl.vecmath import ParamVector, SeededRng
from pushsum_fl.workers import ClientPool

logger = logging.getLogger(__name__)

DataSource = Literal["synthetic", "idx", "quadratic"]


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    algorithm: AlgorithmKind = AlgorithmKind.DFEDSGPSM
    n_clients: int = Field(16, ge=1)
    k_out: Optional[int] = Field(None, ge=1)
    participation: float = Field(PARTICIPATION, gt=0, le=1)
    topology: Optional[TopologyGenerator] = None
    topology_kind: ScheduleKind = "time-varying"
    window_b: int = Field(1, ge=1)
    require_connectivity: bool = False

    rounds: int = Field(100, ge=0)
    eta_l0: float = Field(0.1, gt=0)
    lr_decay: float = Field(LR_DECAY, gt=0, le=1)
    rho: float = Field(0.1, ge=0)
    alpha: float = Field(0.9, ge=0, lt=1)
    local_iters: Optional[int] = Field(5, ge=1)
    local_epochs: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(32, ge=1)
    global_lr: float = Field(GLOBAL_LR, gt=0)

    data: DataSource = "synthetic"
    model: ModelKind = "logistic"
    hidden: int = Field(16, ge=1)
    classes: int = Field(10, ge=2)
    per_class: int = Field(100, ge=1)
    features: int = Field(20, ge=1)
    sep: float = Field(3.0, gt=0)
    idx_dir: Optional[Path] = None
    limit: int = Field(4000, ge=1)
    test_limit: int = Field(1000, ge=1)
    quad_per_client: int = Field(1, ge=1)
    quad_spread: float = Field(1.0, gt=0)
    dirichlet_alpha: Optional[float] = Field(0.3, gt=0)  # None = IID

    seed: int = 0
    out: Optional[Path] = None
    workers: int = Field(1, ge=1)
    record_timing: bool = False

    @model_validator(mode="after")
    def _check(self) -> ExperimentConfig:
        if (self.local_iters is None) == (self.local_epochs is None):
            raise ValueError("set exactly one of local_iters / local_epochs")
        if (self.data == "quadratic") != (self.model == "quadratic"):
            raise ValueError("quadratic data and the quadratic model go together")
        if self.data == "idx" and self.idx_dir is None:
            raise ValueError("data=idx needs idx_dir")
        if self.k_out is not None and self.n_clients > 1 and self.k_out > self.n_clients - 1:
            raise ValueError(f"k_out must not exceed n_clients - 1 = {self.n_clients - 1}")
        generator = self.topology or profile_for(self.algorithm).default_topology
        if self.n_clients < 2 and generator in K_OUT_GENERATORS:
            raise ValueError(f"topology {generator} needs at least 2 clients")
        if self.data == "synthetic" and self.per_class < 2:
            raise ValueError("synthetic data needs per_class >= 2 to leave a test sample per class")
        return self

    @classmethod
    def from_file(cls, path: Path, **overrides: Any) -> ExperimentConfig:
        data = dict(load_json(path, {}))
        given = {k: v for k, v in overrides.items() if v is not None}
        data.update(given)
        # a budget named on the command line replaces the one from the file
        if "local_epochs" in given and "local_iters" not in given:
            data["local_iters"] = None
        elif "local_iters" in given and "local_epochs" not in given:
            data["local_epochs"] = None
        elif data.get("local_epochs") is not None and "local_iters" not in data:
            data["local_iters"] = None
        return cls.model_validate(data)

    @classmethod
    def reference_defaults(cls, algorithm: AlgorithmKind | str, **overrides: Any) -> ExperimentConfig:
        """100 clients, 10 neighbours, eta 0.1 decaying 0.998, batch 128, 5 local epochs."""
        algo = AlgorithmKind(algorithm)
        single = profile_for(algo).single_step
        base: dict[str, Any] = dict(
            algorithm=algo,
            n_clients=100,
            participation=0.1,
            eta_l0=0.1,
            lr_decay=0.998,
            batch_size=128,
            local_iters=None,
            local_epochs=1 if single else 5,
            alpha=0.9,
            rho=0.25 if algo == AlgorithmKind.DFEDSAM else 0.1,
            rounds=300,
        )
        if overrides.get("local_iters") is not None:
            base["local_epochs"] = None
        base.update(overrides)
        return cls.model_validate(base)

    def schedule(self) -> TopologySchedule:
        profile = profile_for(self.algorithm)
        return TopologySchedule(
            n=self.n_clients,
            generator=self.topology or profile.default_topology,
            kind=self.topology_kind,
            window=self.window_b,
            k_out=self.k_out,
            selection=profile.selection,
            participation=self.participation,
        )


# ======================================================================
# PROBLEM
# ======================================================================


@dataclass(slots=True)
class Problem:
    model: Model
    train: Dataset
    test: Dataset
    partition: Partition
    objectives: list[LocalObjective]
    test_objective: LocalObjective

    def label_entropy(self) -> float:
        return mean_label_entropy(self.partition, self.train.labels, self.train.n_classes)


def build_problem(cfg: ExperimentConfig, rng: SeededRng) -> Problem:
    if cfg.data == "quadratic":
        train, partition = make_quadratic(
            cfg.n_clients, cfg.quad_per_client, cfg.features, cfg.quad_spread, rng
        )
        test = train
    else:
        if cfg.data == "synthetic":
            train, test = make_synthetic(cfg.classes, cfg.per_class, cfg.features, cfg.sep, rng)
        else:
            assert cfg.idx_dir is not None
            train = load_idx(
                _idx_file(cfg.idx_dir, "train-images-idx3-ubyte"),
                _idx_file(cfg.idx_dir, "train-labels-idx1-ubyte"),
                cfg.limit,
            )
            test = load_idx(
                _idx_file(cfg.idx_dir, "t10k-images-idx3-ubyte"),
                _idx_file(cfg.idx_dir, "t10k-labels-idx1-ubyte"),
                cfg.test_limit,
                split="test",
            )
        partition = dirichlet_partition(train, cfg.n_clients, cfg.dirichlet_alpha, rng)

    model = build_model(cfg.model, train.n_features, train.n_classes, cfg.hidden)
    objectives = objectives_for(model, train.features, train.labels, partition.client_shards)
    test_objective = LocalObjective(model=model, features=test.features, labels=test.labels, client_id=-1)
    return Problem(model, train, test, partition, objectives, test_objective)


def _idx_file(root: Path, stem: str) -> Path:
    for name in (stem, f"{stem}.gz"):
        if (root / name).exists():
            return root / name
    return root / f"{stem}.gz"


def local_hypers(cfg: ExperimentConfig, objectives: Sequence[LocalObjective], eta: float) -> list[LocalHyper]:
    out = []
    for obj in objectives:
        if cfg.local_iters is not None:
            K = cfg.local_iters
        else:
            assert cfg.local_epochs is not None
            K = iterations_for(obj.n_samples, cfg.batch_size, cfg.local_epochs)
        out.append(LocalHyper(eta_l=eta, rho=cfg.rho, alpha=cfg.alpha, K=K, batch_size=cfg.batch_size))
    return out


# ======================================================================
# RUN
# ======================================================================


@dataclass(slots=True)
class ExperimentResult:
    metrics: list[RoundMetrics]
    final_model: ParamVector
    states: list[ClientState]
    manifest: RunManifest
    connectivity_failures: int = 0
    graphs: list[DiGraphRound] = field(default_factory=list)


def _metrics(
    t: int,
    states: Sequence[ClientState],
    problem: Problem,
    *,
    w_residual: float = 0.0,
    x_residual: float = 0.0,
    wall_ms: int = 0,
) -> RoundMetrics:
    ev = evaluate_global(states, problem.test_objective, problem.objectives)
    ws = [s.w for s in states]
    return RoundMetrics(
        round=t,
        train_loss=ev.train_loss,
        test_loss=ev.test_loss,
        test_accuracy=ev.test_accuracy,
        grad_norm_sq=ev.grad_norm_sq,
        consensus_error=consensus_error(states),
        min_w=float(min(ws)),
        max_w=float(max(ws)),
        w_mass_residual=w_residual,
        x_mass_residual=x_residual,
        wall_ms=wall_ms,
    )


def run_experiment(
    cfg: ExperimentConfig,
    *,
    on_round: Optional[Callable[[RoundMetrics], None]] = None,
    keep_graphs: bool = False,
) -> ExperimentResult:
    rng = SeededRng(cfg.seed)
    problem = build_problem(cfg, rng)
    schedule = cfg.schedule()
    profile = profile_for(cfg.algorithm)

    manifest = new_manifest(
        cfg.model_dump(mode="json"),
        cfg.seed,
        mean_label_entropy=problem.label_entropy() if cfg.data != "quadratic" else None,
        shard_sizes=problem.partition.sizes(),
        k_out=schedule.effective_k_out,
        topology=schedule.generator,
    )
    sink: Optional[MetricsSink] = None
    if cfg.out is not None:
        write_manifest(cfg.out, manifest)
        sink = MetricsSink.open(cfg.out / METRICS_NAME)

    x0 = problem.model.init(rng)
    states = [
        ClientState(client_id=i, x=x0.copy(), w=1.0, last_loss=obj.evaluate(x0))
        for i, obj in enumerate(problem.objectives)
    ]

    history: list[RoundMetrics] = []
    graphs: list[DiGraphRound] = []
    window: deque[DiGraphRound] = deque(maxlen=cfg.window_b)
    failures = 0

    def emit(m: RoundMetrics) -> None:
        history.append(m)
        if sink is not None:
            sink.append(m)
        if on_round is not None:
            on_round(m)

    logger.info(
        "%s: %d clients, %d rounds, topology=%s k_out=%d",
        cfg.algorithm.value,
        cfg.n_clients,
        cfg.rounds,
        schedule.generator,
        schedule.effective_k_out,
    )
    try:
        emit(_metrics(0, states, problem))
        with ClientPool(cfg.workers) as pool:
            for t in range(cfg.rounds):
                started = time.perf_counter()
                eta = decayed_lr(cfg.eta_l0, t, cfg.lr_decay)
                f_values = np.array([s.last_loss for s in states])
                graph = schedule.round_at(t, rng, f_values=f_values)
                if keep_graphs:
                    graphs.append(graph)

                if profile.family != "server":
                    window.append(graph)
                    if len(window) == cfg.window_b:
                        verdict = check_B_connectivity(list(window), cfg.window_b)
                        if not verdict.ok:
                            failures += 1
                            logger.warning(
                                "round %d: window of %d rounds is not strongly connected",
                                t,
                                cfg.window_b,
                            )
                            if cfg.require_connectivity:
                                raise InvariantViolationError(t, "B-bounded strong connectivity", 1.0)

                states, stats = run_round(
                    states,
                    cfg.algorithm,
                    graph,
                    local_hypers(cfg, problem.objectives, eta),
                    problem.objectives,
                    rng,
                    round_idx=t,
                    pool=pool,
                    global_lr=cfg.global_lr,
                )
                wall_ms = int((time.perf_counter() - started) * 1000) if cfg.record_timing else 0
                m = _metrics(
                    t + 1,
                    states,
                    problem,
                    w_residual=stats.w_mass_residual,
                    x_residual=stats.x_mass_residual,
                    wall_ms=wall_ms,
                )
                emit(m)
                if logger.isEnabledFor(logging.DEBUG):
                    accs = per_client_accuracy(states, problem.test_objective)
                    logger.debug("round %d per-client accuracy %s", t + 1, np.round(accs, 4).tolist())
    finally:
        if sink is not None:
            sink.close()

    return ExperimentResult(
        metrics=history,
        final_model=np.mean(np.stack([s.x for s in states]), axis=0),
        states=states,
        manifest=manifest,
        connectivity_failures=failures,
        graphs=graphs,
    )


# ======================================================================
# SWEEP / TOPOLOGY CHECK
# ======================================================================


@dataclass(frozen=True, slots=True)
class SweepRow:
    param: str
    value: float
    final_accuracy: float
    final_train_loss: float
    final_grad_norm_sq: float


def sweep(
    cfg: ExperimentConfig,
    param: str,
    values: Sequence[float],
    *,
    on_run: Optional[Callable[[SweepRow], None]] = None,
) -> list[SweepRow]:
    """One run per value of a single hyper-parameter; everything else fixed."""
    if param not in ExperimentConfig.model_fields:
        raise ValueError(f"unknown config field: {param}")
    rows = []
    for value in values:
        update: dict[str, Any] = {param: value}
        if cfg.out is not None:
            update["out"] = cfg.out / f"{param}={value}"
        run_cfg = ExperimentConfig.model_validate({**cfg.model_dump(), **update})
        result = run_experiment(run_cfg)
        last = result.metrics[-1]
        row = SweepRow(param, float(value), last.test_accuracy, last.train_loss, last.grad_norm_sq)
        rows.append(row)
        if on_run is not None:
            on_run(row)

    if cfg.out is not None:
        cfg.out.mkdir(parents=True, exist_ok=True)
        with (cfg.out / SWEEP_SUMMARY_NAME).open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["param", "value", "final_accuracy", "final_train_loss", "final_grad_norm_sq"])
            for r in rows:
                writer.writerow(
                    [r.param, repr(r.value), repr(r.final_accuracy), repr(r.final_train_loss), repr(r.final_grad_norm_sq)]
                )
    return rows


def topology_check(cfg: ExperimentConfig, rounds: Optional[int] = None) -> tuple[ConnectivityVerdict, float]:
    """
    B-connectivity verdict and worst column residual for the configured
    schedule. Strategy selection is drawn with a flat loss snapshot.
    """
    schedule = cfg.schedule()
    rng = SeededRng(cfg.seed)
    T = max(cfg.window_b, rounds if rounds is not None else cfg.rounds)
    flat = np.zeros(cfg.n_clients)
    graphs = [schedule.round_at(t, rng, f_values=flat) for t in range(T)]
    residual = max_column_residual(graphs) if graphs[0].family != "star" else 0.0
    return check_B_connectivity(graphs, cfg.window_b), residual
