"""
Per-round communication and aggregation for DFedSGPSM and its baselines.

Every algorithm is one row of ALGORITHMS: a mixing family, the local
optimizer switches it honours, and how its out-neighbours are chosen. All
rows share the same local update and the same message-passing path, so the
reductions (rho=0, alpha=0 -> OSGP; K=1 -> SGP; ...) hold bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Literal, Optional, Sequence

import numpy as np

from pushsum_fl.config import GLOBAL_LR, MASS_TOL, STOCHASTIC_TOL, W_FLOOR
from pushsum_fl.errors import (
    InvariantViolationError,
    PushSumUnderflowError,
    TopologyError,
)
from pushsum_fl.local_optim import LocalHyper, LocalTrace, local_round
from pushsum_fl.models import ClientState, Message, stack_x
from pushsum_fl.objectives import LocalObjective
from pushsum_fl.topology import DiGraphRound, Selection, TopologyGenerator
from pushsum_fl.vecmath import ParamVector, SeededRng
from pushsum_fl.workers import ClientPool

logger = logging.getLogger(__name__)

Family = Literal["push-sum", "symmetric", "server"]


class AlgorithmKind(str, Enum):
    DFEDSGPSM = "DFedSGPSM"
    DFEDSGPSM_S = "DFedSGPSM-S"
    OSGP = "OSGP"
    OSGP_M = "OSGP-M"
    SGP = "SGP"
    D_PSGD = "D-PSGD"
    DFEDAVG = "DFedAvg"
    DFEDAVGM = "DFedAvgM"
    DFEDSAM = "DFedSAM"
    FEDAVG = "FedAvg"


@dataclass(frozen=True, slots=True)
class AlgorithmProfile:
    kind: AlgorithmKind
    family: Family
    use_rho: bool
    use_alpha: bool
    single_step: bool = False
    selection: Selection = "uniform"

    @property
    def default_topology(self) -> TopologyGenerator:
        if self.family == "push-sum":
            return "directed-erdos-renyi"
        if self.family == "symmetric":
            return "symmetric"
        return "star"

    @property
    def mixing(self) -> str:
        return {"push-sum": "column", "symmetric": "doubly", "server": "star"}[self.family]

    def local_hyper(self, hyper: LocalHyper) -> LocalHyper:
        return replace(
            hyper,
            rho=hyper.rho if self.use_rho else 0.0,
            alpha=hyper.alpha if self.use_alpha else 0.0,
            K=1 if self.single_step else hyper.K,
        )


ALGORITHMS: dict[AlgorithmKind, AlgorithmProfile] = {
    p.kind: p
    for p in (
        AlgorithmProfile(AlgorithmKind.DFEDSGPSM, "push-sum", use_rho=True, use_alpha=True),
        AlgorithmProfile(
            AlgorithmKind.DFEDSGPSM_S, "push-sum", use_rho=True, use_alpha=True, selection="strategy"
        ),
        AlgorithmProfile(AlgorithmKind.OSGP, "push-sum", use_rho=False, use_alpha=False),
        AlgorithmProfile(AlgorithmKind.OSGP_M, "push-sum", use_rho=False, use_alpha=True),
        AlgorithmProfile(
            AlgorithmKind.SGP, "push-sum", use_rho=False, use_alpha=False, single_step=True
        ),
        AlgorithmProfile(
            AlgorithmKind.D_PSGD, "symmetric", use_rho=False, use_alpha=False, single_step=True
        ),
        AlgorithmProfile(AlgorithmKind.DFEDAVG, "symmetric", use_rho=False, use_alpha=False),
        AlgorithmProfile(AlgorithmKind.DFEDAVGM, "symmetric", use_rho=False, use_alpha=True),
        AlgorithmProfile(AlgorithmKind.DFEDSAM, "symmetric", use_rho=True, use_alpha=False),
        AlgorithmProfile(AlgorithmKind.FEDAVG, "server", use_rho=False, use_alpha=False),
    )
}


def profile_for(algo: AlgorithmKind | str) -> AlgorithmProfile:
    return ALGORITHMS[AlgorithmKind(algo)]


@dataclass(slots=True)
class RoundStats:
    consensus_error: float
    min_w: float
    max_w: float
    w_mass_residual: float = 0.0
    x_mass_residual: float = 0.0
    traces: dict[int, LocalTrace] = field(default_factory=dict)


# ======================================================================
# CHECKS
# ======================================================================


def check_topology(profile: AlgorithmProfile, graph: DiGraphRound) -> None:
    if graph.family != profile.mixing:
        raise TopologyError(
            f"{profile.kind.value} needs a {profile.mixing} round, got {graph.family}"
        )
    if profile.family == "push-sum":
        if np.any(graph.weights < 0) or graph.column_residual() > STOCHASTIC_TOL:
            raise TopologyError("push-sum round is not column-stochastic")
    elif profile.family == "symmetric":
        if not graph.is_symmetric():
            raise TopologyError("symmetric round has an asymmetric mixing matrix")
        if max(graph.column_residual(), graph.row_residual()) > STOCHASTIC_TOL:
            raise TopologyError("symmetric round is not doubly stochastic")
    elif not graph.participants:
        raise TopologyError("server round has no participants")


def consensus_error(states: Sequence[ClientState]) -> float:
    """(1/n) sum_i ||x_i / w_i - mean_j x_j||^2"""
    x = stack_x(list(states))
    x_bar = x.mean(axis=0)
    z = np.stack([s.x / s.w for s in states])
    return float(np.mean(np.sum((z - x_bar) ** 2, axis=1)))


# ======================================================================
# MESSAGE PASSING
# ======================================================================


def outbox(graph: DiGraphRound, x_half: Sequence[ParamVector], w: Sequence[float]) -> list[Message]:
    """Each sender i scales by its own out-weight p_{j,i} before sending."""
    messages: list[Message] = []
    for i, outs in enumerate(graph.out_neighbors):
        for j in outs:
            p = float(graph.weights[j, i])
            if p == 0.0:
                continue
            messages.append(Message(sender=i, receiver=j, payload_x=p * x_half[i], payload_w=p * w[i]))
    return messages


def deliver(messages: Sequence[Message], n: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Sums inboxes in sender-id order."""
    inbox: list[list[Message]] = [[] for _ in range(n)]
    for m in messages:
        inbox[m.receiver].append(m)
    x = np.zeros((n, dim))
    w = np.zeros(n)
    for j in range(n):
        for m in sorted(inbox[j], key=lambda m: m.sender):
            x[j] = x[j] + m.payload_x
            w[j] = w[j] + m.payload_w
    return x, w


# ======================================================================
# ROUND
# ======================================================================


def run_round(
    states: Sequence[ClientState],
    algo: AlgorithmKind | str,
    graph: DiGraphRound,
    hyper: LocalHyper | Sequence[LocalHyper],
    objectives: Sequence[LocalObjective],
    rng: SeededRng,
    *,
    round_idx: int = 0,
    pool: Optional[ClientPool] = None,
    record_trace: bool = False,
    global_lr: float = GLOBAL_LR,
) -> tuple[list[ClientState], RoundStats]:
    profile = profile_for(algo)
    check_topology(profile, graph)
    n = len(states)
    if graph.n != n or len(objectives) != n:
        raise TopologyError(f"round built for {graph.n} clients, got {n} states")

    hypers = [hyper] * n if isinstance(hyper, LocalHyper) else list(hyper)
    hypers = [profile.local_hyper(h) for h in hypers]
    pool = pool or ClientPool(1)
    push_sum = profile.family == "push-sum"

    active = list(graph.participants) if profile.family == "server" else list(range(n))
    weights_in = [s.w if push_sum else 1.0 for s in states]

    def local(i: int) -> tuple[ParamVector, Optional[LocalTrace]]:
        return local_round(
            objectives[i],
            states[i].x,
            weights_in[i],
            hypers[i],
            rng,
            client=i,
            round_idx=round_idx,
            record_trace=record_trace,
        )

    results = dict(zip(active, pool.map(local, active)))
    x_half = [results[i][0] if i in results else states[i].x for i in range(n)]
    traces = {i: r[1] for i, r in results.items() if r[1] is not None}
    dim = x_half[0].size

    if profile.family == "server":
        server_x = states[active[0]].x
        mean = np.zeros(dim)
        for i in active:
            mean = mean + x_half[i]
        mean = mean / len(active)
        new_x = np.tile(server_x + global_lr * (mean - server_x), (n, 1))
        new_w = np.ones(n)
        x_residual = w_residual = 0.0
    else:
        new_x, new_w = deliver(outbox(graph, x_half, weights_in), n, dim)
        if not push_sum:
            new_w = np.ones(n)
        total_half = np.sum(np.stack(x_half), axis=0)
        x_residual = float(np.max(np.abs(new_x.sum(axis=0) - total_half)))
        w_residual = abs(float(new_w.sum()) - n)
        if w_residual > MASS_TOL * n:
            raise InvariantViolationError(round_idx, "push-sum weight conservation", w_residual)
        if x_residual > MASS_TOL * max(1.0, float(np.linalg.norm(total_half))):
            raise InvariantViolationError(round_idx, "parameter mass conservation", x_residual)

    low = int(np.argmin(new_w))
    if new_w[low] < W_FLOOR:
        raise PushSumUnderflowError(round_idx, low, float(new_w[low]))

    new_states = [
        ClientState(client_id=i, x=new_x[i].copy(), w=float(new_w[i]), last_loss=states[i].last_loss)
        for i in range(n)
    ]

    def refresh(i: int) -> float:
        return objectives[i].evaluate(new_states[i].z)

    for i, loss in zip(range(n), pool.map(refresh, list(range(n)))):
        new_states[i].last_loss = loss

    stats = RoundStats(
        consensus_error=consensus_error(new_states),
        min_w=float(new_w.min()),
        max_w=float(new_w.max()),
        w_mass_residual=w_residual,
        x_mass_residual=x_residual,
        traces=traces,
    )
    logger.debug(
        "round %d %s: consensus=%.3e w in [%.4f, %.4f]",
        round_idx,
        profile.kind.value,
        stats.consensus_error,
        stats.min_w,
        stats.max_w,
    )
    return new_states, stats
