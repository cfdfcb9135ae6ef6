"""
Communication graphs.

weights[j, i] is the share p_{j,i} of sender i's mass delivered to j, so a
push-sum round is column-stochastic. Every node keeps a self-loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Literal, Optional, Sequence

import networkx as nx
import numpy as np

from pushsum_fl.config import PARTICIPATION, STOCHASTIC_TOL
from pushsum_fl.errors import NonFiniteError, TopologyError
from pushsum_fl.vecmath import SeededRng, Stream

logger = logging.getLogger(__name__)

TopologyGenerator = Literal[
    "directed-ring",
    "directed-erdos-renyi",
    "complete",
    "symmetric",
    "star",
]
ScheduleKind = Literal["static", "time-varying"]
Selection = Literal["uniform", "strategy"]
MixingFamily = Literal["column", "doubly", "star"]

# generators that draw k_out peers per client
K_OUT_GENERATORS: frozenset[str] = frozenset({"directed-erdos-renyi", "symmetric"})


@dataclass(frozen=True, slots=True)
class DiGraphRound:
    n: int
    out_neighbors: tuple[tuple[int, ...], ...]  # sorted, self included
    weights: np.ndarray
    family: MixingFamily = "column"
    participants: tuple[int, ...] = ()  # star rounds only

    def in_neighbors(self, i: int) -> tuple[int, ...]:
        return tuple(int(j) for j in np.flatnonzero(self.weights[i] > 0))

    def column_residual(self) -> float:
        return float(np.max(np.abs(self.weights.sum(axis=0) - 1.0)))

    def row_residual(self) -> float:
        return float(np.max(np.abs(self.weights.sum(axis=1) - 1.0)))

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.weights, self.weights.T))

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, outs in enumerate(self.out_neighbors) for j in outs if j != i]


def from_out_neighbors(out: Sequence[Iterable[int]]) -> DiGraphRound:
    """Column-stochastic round with p_{j,i} = 1/|N_i^out| (self-loop added)."""
    n = len(out)
    neighbors: list[tuple[int, ...]] = []
    weights = np.zeros((n, n))
    for i, outs in enumerate(out):
        members = sorted({int(j) for j in outs} | {i})
        if members[0] < 0 or members[-1] >= n:
            raise TopologyError(f"client {i} names an out-neighbor outside [0, {n})")
        weights[members, i] = 1.0 / len(members)
        neighbors.append(tuple(members))
    return DiGraphRound(n=n, out_neighbors=tuple(neighbors), weights=weights)


def doubly_stochastic(adjacency: np.ndarray) -> np.ndarray:
    """Metropolis-Hastings weights on a symmetric graph."""
    adj = np.asarray(adjacency, dtype=bool)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise TopologyError(f"adjacency must be square, got shape {adj.shape}")
    if not np.array_equal(adj, adj.T):
        raise TopologyError("adjacency is not symmetric")
    n = adj.shape[0]
    off = adj & ~np.eye(n, dtype=bool)
    deg = off.sum(axis=1)
    weights = np.zeros((n, n))
    for i in range(n):
        for j in np.flatnonzero(off[i]):
            weights[i, j] = 1.0 / (1.0 + max(deg[i], deg[j]))
    for i in range(n):
        weights[i, i] = 1.0 - weights[i].sum()
    return weights


def symmetric_round(adjacency: np.ndarray) -> DiGraphRound:
    adj = np.asarray(adjacency, dtype=bool) | np.eye(len(adjacency), dtype=bool)
    weights = doubly_stochastic(adj)
    neighbors = tuple(tuple(int(j) for j in np.flatnonzero(adj[:, i])) for i in range(len(adj)))
    return DiGraphRound(n=len(adj), out_neighbors=neighbors, weights=weights, family="doubly")


def star_round(n: int, participants: Sequence[int]) -> DiGraphRound:
    """Server mean of the participants broadcast to every client (row-stochastic)."""
    part = tuple(sorted(int(i) for i in participants))
    weights = np.zeros((n, n))
    weights[:, list(part)] = 1.0 / len(part)
    neighbors = tuple(tuple(range(n)) if i in part else (i,) for i in range(n))
    return DiGraphRound(
        n=n, out_neighbors=neighbors, weights=weights, family="star", participants=part
    )


# ======================================================================
# NEIGHBOR SELECTION
# ======================================================================


def neighbor_select_log_weights(f_values: Sequence[float] | np.ndarray, i: int) -> np.ndarray:
    """Unnormalised log p(b_ij) = |f_i - f_j|."""
    f = np.asarray(f_values, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(f))
    if bad.size:
        raise NonFiniteError("loss snapshot", int(bad[0]))
    return np.abs(f[i] - f)


def neighbor_select_probs(f_values: Sequence[float] | np.ndarray, i: int) -> np.ndarray:
    """p(b_ij) proportional to exp(|f_i - f_j|), max-shifted."""
    gaps = neighbor_select_log_weights(f_values, i)
    e = np.exp(gaps - gaps.max())
    return e / e.sum()


def sample_by_log_weights(
    log_weights: np.ndarray,
    k_out: int,
    gen: np.random.Generator,
    *,
    i: int,
) -> tuple[int, ...]:
    """
    Gumbel-top-k: the k_out largest log_weights + Gumbel(0, 1) among peers != i.
    Same law as drawing without replacement proportional to exp(log_weights),
    but no peer underflows to zero probability.
    """
    n = int(np.size(log_weights))
    if k_out > n - 1:
        raise TopologyError(f"client {i}: k_out={k_out} exceeds support of {n - 1} peers")
    if k_out == 0:
        return (i,)
    keys = np.asarray(log_weights, dtype=np.float64) + gen.gumbel(size=n)
    keys[i] = -np.inf
    chosen = np.argsort(-keys, kind="stable")[:k_out]
    return tuple(sorted({int(j) for j in chosen} | {i}))


def sample_out_neighbors(
    probs: np.ndarray,
    k_out: int,
    gen: np.random.Generator,
    *,
    i: int,
) -> tuple[int, ...]:
    """k_out distinct peers != i drawn without replacement, plus i itself."""
    q = np.array(probs, dtype=np.float64)
    q[i] = 0.0
    support = int(np.count_nonzero(q > 0))
    if k_out > support:
        raise TopologyError(f"client {i}: k_out={k_out} exceeds support of {support} peers")
    if k_out == 0:
        return (i,)
    q /= q.sum()
    chosen = gen.choice(q.size, size=k_out, replace=False, p=q)
    return tuple(sorted({int(j) for j in chosen} | {i}))


def default_k_out(n: int, participation: float = PARTICIPATION) -> int:
    """10 out-neighbours at n=100 and participation 0.1."""
    if n < 2:
        return 0
    return max(1, min(n - 1, int(round(participation * n))))


# ======================================================================
# SCHEDULES
# ======================================================================


@dataclass(frozen=True, slots=True)
class TopologySchedule:
    n: int
    generator: TopologyGenerator = "directed-erdos-renyi"
    kind: ScheduleKind = "time-varying"
    window: int = 1
    k_out: Optional[int] = None
    selection: Selection = "uniform"
    participation: float = PARTICIPATION

    @property
    def effective_k_out(self) -> int:
        return self.k_out if self.k_out is not None else default_k_out(self.n, self.participation)

    def round_at(
        self,
        t: int,
        rng: SeededRng,
        f_values: Optional[np.ndarray] = None,
    ) -> DiGraphRound:
        return gen_round(self, t, rng, self.effective_k_out, f_values=f_values)

    def rounds(self, T: int, rng: SeededRng) -> list[DiGraphRound]:
        return [self.round_at(t, rng) for t in range(T)]


def _check_k_out(n: int, k_out: int) -> None:
    if not 1 <= k_out <= n - 1:
        raise TopologyError(f"k_out must lie in [1, {n - 1}], got {k_out}")


def gen_round(
    sched: TopologySchedule,
    t: int,
    rng: SeededRng,
    k_out: int,
    *,
    f_values: Optional[np.ndarray] = None,
) -> DiGraphRound:
    n = sched.n
    key = 0 if sched.kind == "static" else t

    if sched.generator == "complete":
        return from_out_neighbors([range(n)] * n)

    if sched.generator == "directed-ring":
        return from_out_neighbors([(i, (i + 1) % n) for i in range(n)])

    if sched.generator == "star":
        m = max(1, int(round(sched.participation * n)))
        gen = rng.stream(Stream.SERVER, round_idx=key)
        return star_round(n, gen.choice(n, size=m, replace=False))

    _check_k_out(n, k_out)
    gen = rng.stream(Stream.TOPOLOGY, round_idx=key)
    uniform = np.full(n, 1.0 / n)

    if sched.generator == "symmetric":
        adj = np.eye(n, dtype=bool)
        for i in range(n):
            for j in sample_out_neighbors(uniform, k_out, gen, i=i):
                adj[i, j] = adj[j, i] = True
        return symmetric_round(adj)

    if sched.generator == "directed-erdos-renyi":
        out = []
        for i in range(n):
            if sched.selection == "strategy":
                if f_values is None:
                    raise TopologyError("strategy selection needs a loss snapshot")
                log_w = neighbor_select_log_weights(f_values, i)
                out.append(sample_by_log_weights(log_w, k_out, gen, i=i))
            else:
                out.append(sample_out_neighbors(uniform, k_out, gen, i=i))
        return from_out_neighbors(out)

    raise TopologyError(f"unknown topology generator: {sched.generator}")


# ======================================================================
# CONNECTIVITY
# ======================================================================


@dataclass(frozen=True, slots=True)
class ConnectivityVerdict:
    ok: bool
    failing_window: Optional[int] = None
    n_windows: int = 0

    def __bool__(self) -> bool:
        return self.ok


def window_union(rounds: Sequence[DiGraphRound], start: int, B: int) -> nx.DiGraph:
    g = nx.DiGraph()
    g.add_nodes_from(range(rounds[0].n))
    for r in rounds[start : start + B]:
        g.add_edges_from(r.edges())
    return g


def check_B_connectivity(rounds: Sequence[DiGraphRound], B: int) -> ConnectivityVerdict:
    """Every length-B sliding window must have a strongly connected union."""
    if B < 1:
        raise ValueError("window B must be positive")
    if len(rounds) < B:
        raise ValueError(f"need at least B={B} rounds, got {len(rounds)}")
    n_windows = len(rounds) - B + 1
    for start in range(n_windows):
        union = window_union(rounds, start, B)
        if nx.number_strongly_connected_components(union) != 1:
            logger.debug("window %d of length %d is not strongly connected", start, B)
            return ConnectivityVerdict(ok=False, failing_window=start, n_windows=n_windows)
    return ConnectivityVerdict(ok=True, n_windows=n_windows)


def max_column_residual(rounds: Iterable[DiGraphRound]) -> float:
    return max((r.column_residual() for r in rounds), default=0.0)


def is_column_stochastic(r: DiGraphRound, tol: float = STOCHASTIC_TOL) -> bool:
    return bool(np.all(r.weights >= 0)) and r.column_residual() <= tol and math.isfinite(
        r.column_residual()
    )
