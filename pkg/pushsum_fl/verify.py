"""
Independent oracles for the protocol engine.

Each oracle reaches the same quantity along a different code path: dense
matrix products instead of message passing, direct double sums instead of
the momentum recursion, breadth-first reachability instead of an SCC
decomposition. Only public entry points of the engine are used.
"""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from pushsum_fl.config import FD_STEP, MASS_TOL, STOCHASTIC_TOL
from pushsum_fl.data import make_quadratic, make_synthetic
from pushsum_fl.experiment import ExperimentConfig, run_experiment
from pushsum_fl.local_optim import LocalHyper, LocalTrace, local_round
from pushsum_fl.metrics_io import metrics_to_csv
from pushsum_fl.models import ClientState, OracleReport
from pushsum_fl.objectives import LocalObjective, build_model, objectives_for
from pushsum_fl.protocol import AlgorithmKind, run_round
from pushsum_fl.topology import (
    DiGraphRound,
    TopologySchedule,
    check_B_connectivity,
    from_out_neighbors,
)
from pushsum_fl.vecmath import ParamVector, SeededRng, Stream, finite_diff_grad

logger = logging.getLogger(__name__)

ENGINE_TOL = 1e-12
CLOSED_FORM_TOL = 1e-10

CONNECTIVITY_CASES = 100
CONNECTIVITY_MAX_N = 6


# ======================================================================
# ORACLES
# ======================================================================


def matrix_power_consensus_oracle(
    rounds: Sequence[DiGraphRound],
    x0: np.ndarray,
    w0: np.ndarray,
    T: int | None = None,
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """
    Pure mixing (eta_l = 0): x^{t+1} = P(t) x^t, w^{t+1} = P(t) w^t with dense
    products. Returns (x, w, z) after every round.
    """
    T = len(rounds) if T is None else T
    x = np.array(x0, dtype=np.float64)
    w = np.array(w0, dtype=np.float64)
    out = []
    for t in range(T):
        P = rounds[t].weights
        x = P @ x
        w = P @ w
        out.append((x.copy(), w.copy(), x / w[:, None]))
    return out


def momentum_closed_form_oracle(
    trace: LocalTrace | Sequence[ParamVector],
    eta_l: float,
    alpha: float,
    K: int,
) -> ParamVector:
    """-eta_l * sum_{k=1..K} sum_{s=1..k} alpha^(k-s) g_s, summed term by term."""
    grads = trace.gradients() if isinstance(trace, LocalTrace) else list(trace)
    if len(grads) != K:
        raise ValueError(f"trace holds {len(grads)} gradients, expected K={K}")
    total = np.zeros_like(grads[0])
    for k in range(1, K + 1):
        for s in range(1, k + 1):
            total = total + alpha ** (k - s) * grads[s - 1]
    return -eta_l * total


def tilde_alpha(alpha: float, K: int) -> float:
    return float(sum(alpha ** (k - s) for k in range(1, K + 1) for s in range(1, k + 1)))


def tilde_alpha_bound_check(alpha: float, K: int) -> tuple[bool, float]:
    """0 < tilde_alpha < K / (1 - alpha); at alpha = 0 the bound is an equality."""
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    if K < 1:
        raise ValueError(f"K must be at least 1, got {K}")
    at = tilde_alpha(alpha, K)
    bound = K / (1.0 - alpha)
    ok = at > 0 and (at <= bound if alpha == 0 else at < bound)
    return ok, at


def _reachable(adj: list[set[int]], start: int) -> set[int]:
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def bfs_B_connectivity(rounds: Sequence[DiGraphRound], B: int) -> tuple[bool, int | None]:
    """Brute force: every node reaches every node in every window union."""
    n = rounds[0].n
    for start in range(len(rounds) - B + 1):
        adj: list[set[int]] = [set() for _ in range(n)]
        for r in rounds[start : start + B]:
            for i, outs in enumerate(r.out_neighbors):
                adj[i].update(outs)
        if any(len(_reachable(adj, i)) != n for i in range(n)):
            return False, start
    return True, None


# ======================================================================
# FIXTURES
# ======================================================================


def _small_logistic(seed: int) -> tuple[list[LocalObjective], int]:
    rng = SeededRng(seed)
    train, _ = make_synthetic(3, 20, 4, 3.0, rng)
    model = build_model("logistic", train.n_features, train.n_classes)
    shards = (np.arange(train.labels.size, dtype=np.int64),)
    return objectives_for(model, train.features, train.labels, shards), model.dim


def _quadratic_objectives(n: int, d: int, seed: int) -> list[LocalObjective]:
    ds, part = make_quadratic(n, 1, d, 1.0, SeededRng(seed))
    return objectives_for(build_model("quadratic", d, 1), ds.features, ds.labels, part.client_shards)


def _report(name: str, err: float, tol: float, witness: str) -> OracleReport:
    ok = math.isfinite(err) and err <= tol
    return OracleReport(name, ok, err, "" if ok else witness)


# ======================================================================
# CHECKS
# ======================================================================


def check_column_stochastic(seed: int = 0) -> OracleReport:
    rng = SeededRng(seed)
    worst, witness = 0.0, ""
    gen = rng.stream(Stream.ORACLE, iteration=1)
    for n in range(2, 13):
        f = gen.normal(size=n)
        for generator in ("complete", "directed-ring", "directed-erdos-renyi"):
            for selection in ("uniform", "strategy"):
                sched = TopologySchedule(n, generator, selection=selection, k_out=max(1, n // 3))
                for t in range(5):
                    r = sched.round_at(t, rng, f_values=f)
                    res = r.column_residual()
                    if np.any(r.weights < 0):
                        res = math.inf
                    if res > worst:
                        worst, witness = res, f"seed={seed} n={n} {generator}/{selection} t={t}"
    return _report("column stochasticity", worst, STOCHASTIC_TOL, witness)


def check_mass_conservation(seed: int = 0) -> OracleReport:
    cfg = ExperimentConfig(
        algorithm=AlgorithmKind.DFEDSGPSM,
        n_clients=6,
        k_out=2,
        rounds=200,
        classes=3,
        per_class=20,
        features=4,
        local_iters=2,
        batch_size=8,
        seed=seed,
    )
    result = run_experiment(cfg)
    w_err = max(m.w_mass_residual for m in result.metrics) / cfg.n_clients
    x_err = max(m.x_mass_residual for m in result.metrics)
    scale = max(1.0, float(np.linalg.norm(np.sum([s.x for s in result.states], axis=0))))
    return _report(
        "mass conservation",
        max(w_err, x_err / scale),
        MASS_TOL,
        f"seed={seed} n=6 k_out=2 T=200",
    )


def check_momentum_closed_form(seed: int = 0, configs: int = 50) -> OracleReport:
    objectives, dim = _small_logistic(seed)
    obj = objectives[0]
    gen = SeededRng(seed).stream(Stream.ORACLE, iteration=2)
    worst, witness = 0.0, ""
    for c in range(configs):
        K = int(gen.integers(1, 9))
        alpha = float(gen.uniform(0.0, 0.95))
        rho = float(gen.choice([0.0, gen.uniform(0.01, 0.3)]))
        w = float(gen.uniform(0.5, 2.0))
        x_in = gen.normal(scale=0.5, size=dim)
        hyper = LocalHyper(eta_l=0.05, rho=rho, alpha=alpha, K=K, batch_size=8)
        x_out, trace = local_round(obj, x_in, w, hyper, SeededRng(seed + c), record_trace=True)
        assert trace is not None
        expected = momentum_closed_form_oracle(trace, hyper.eta_l, alpha, K)
        delta = x_out - x_in
        err = float(np.linalg.norm(delta - expected) / max(np.linalg.norm(expected), 1e-300))
        if err > worst:
            worst, witness = err, f"seed={seed} config={c} K={K} alpha={alpha:.4f} rho={rho:.4f}"
    return _report("momentum closed form", worst, CLOSED_FORM_TOL, witness)


def _engine_pure_mixing(
    rounds: Sequence[DiGraphRound], x0: np.ndarray, objectives: Sequence[LocalObjective]
) -> list[list[ClientState]]:
    states = [ClientState(client_id=i, x=x0[i].copy(), w=1.0) for i in range(len(x0))]
    hyper = LocalHyper(eta_l=0.0, K=1, batch_size=1)
    history = []
    for t, graph in enumerate(rounds):
        states, _ = run_round(states, AlgorithmKind.OSGP, graph, hyper, objectives, SeededRng(0), round_idx=t)
        history.append(states)
    return history


def check_push_sum_vs_dense(seed: int = 0, schedules: int = 20) -> OracleReport:
    gen = SeededRng(seed).stream(Stream.ORACLE, iteration=3)
    worst, witness = 0.0, ""
    for s in range(schedules):
        n = int(gen.integers(2, 9))
        T = int(gen.integers(1, 31))
        d = 3
        sched = TopologySchedule(n, "directed-erdos-renyi", k_out=int(gen.integers(1, n)))
        rounds = sched.rounds(T, SeededRng(seed * 1000 + s))
        x0 = gen.normal(size=(n, d))
        dense = matrix_power_consensus_oracle(rounds, x0, np.ones(n))
        engine = _engine_pure_mixing(rounds, x0, _quadratic_objectives(n, d, seed))
        for t, ((x, w, z), states) in enumerate(zip(dense, engine)):
            err = max(
                float(np.max(np.abs(np.stack([st.x for st in states]) - x))),
                float(np.max(np.abs(np.array([st.w for st in states]) - w))),
                float(np.max(np.abs(np.stack([st.z for st in states]) - z))),
            )
            if err > worst:
                worst, witness = err, f"seed={seed} schedule={s} n={n} T={T} t={t}"

    # irregular 3-node digraph: N0={0,1,2}, N1={1,2}, N2={2,0}
    hand = from_out_neighbors([(0, 1, 2), (1, 2), (2, 0)])
    x0 = np.arange(3, dtype=np.float64).reshape(3, 1)
    w1 = np.array([st.w for st in _engine_pure_mixing([hand], x0, _quadratic_objectives(3, 1, seed))[0]])
    hand_err = float(np.max(np.abs(w1 - np.array([5 / 6, 5 / 6, 4 / 3]))))
    if hand_err > worst:
        worst, witness = hand_err, "3-node irregular digraph w^1"
    return _report("push-sum vs dense oracle", worst, ENGINE_TOL, witness)


def check_reduction(seeds: Iterable[int] = range(5), rounds: int = 50) -> OracleReport:
    """DFedSGPSM with rho = alpha = 0 must replay OSGP bit for bit."""
    mismatches = 0
    witness = ""
    for seed in seeds:
        for topology in ("directed-erdos-renyi", "directed-ring"):
            common = dict(
                n_clients=6,
                k_out=2,
                topology=topology,
                rounds=rounds,
                classes=3,
                per_class=20,
                features=4,
                local_iters=3,
                batch_size=8,
                seed=seed,
                rho=0.0,
                alpha=0.0,
            )
            a = run_experiment(ExperimentConfig(algorithm=AlgorithmKind.DFEDSGPSM, **common))
            b = run_experiment(
                ExperimentConfig(algorithm=AlgorithmKind.OSGP, **{**common, "rho": 0.3, "alpha": 0.9})
            )
            same = a.metrics == b.metrics and all(
                np.array_equal(sa.x, sb.x) and sa.w == sb.w for sa, sb in zip(a.states, b.states)
            )
            if not same:
                mismatches += 1
                witness = witness or f"seed={seed} topology={topology} T={rounds}"
    return OracleReport("rho=alpha=0 reduction", mismatches == 0, float(mismatches), witness)


def check_gradients(seed: int = 0, points: int = 20) -> OracleReport:
    gen = SeededRng(seed).stream(Stream.ORACLE, iteration=4)
    rng = SeededRng(seed)
    train, _ = make_synthetic(3, 5, 4, 2.0, rng)
    quad, _ = make_quadratic(1, 6, 4, 1.0, rng)
    cases = [
        ("quadratic", quad.features, quad.labels, 1, 1e-5),
        ("logistic", train.features, train.labels, 3, 1e-5),
        ("mlp", train.features, train.labels, 3, 1e-4),
    ]
    worst_ratio, worst, witness = 0.0, 0.0, ""
    for kind, X, y, classes, tol in cases:
        obj = LocalObjective(build_model(kind, X.shape[1], classes, hidden=5), X, y)
        for p in range(points):
            x = gen.normal(scale=0.5, size=obj.params_dim)
            g = obj.gradient(x)
            fd = finite_diff_grad(obj.evaluate, x, FD_STEP)
            err = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8))
            if err / tol > worst_ratio:
                worst_ratio, worst, witness = err / tol, err, f"seed={seed} model={kind} point={p}"
    return OracleReport("analytic gradients", worst_ratio <= 1.0, worst, "" if worst_ratio <= 1.0 else witness)


def check_quadratic_optimum(seed: int = 0) -> OracleReport:
    cfg = ExperimentConfig(
        algorithm=AlgorithmKind.DFEDSGPSM,
        data="quadratic",
        model="quadratic",
        n_clients=8,
        topology="directed-ring",
        rounds=200,
        eta_l0=0.1,
        lr_decay=1.0,
        rho=1e-5,
        alpha=0.5,
        local_iters=5,
        batch_size=1,
        features=5,
        seed=seed,
    )
    result = run_experiment(cfg)
    ds, _ = make_quadratic(8, 1, 5, 1.0, SeededRng(seed))
    centroid = ds.features.mean(axis=0)
    err = float(np.linalg.norm(result.final_model - centroid))
    return _report("quadratic optimum", err, 1e-3, f"seed={seed} n=8 ring T=200")


def check_tilde_alpha() -> OracleReport:
    failures = []
    worst = 0.0
    for alpha in (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99):
        for K in range(1, 11):
            ok, at = tilde_alpha_bound_check(alpha, K)
            worst = max(worst, at / (K / (1.0 - alpha)))
            if not ok:
                failures.append(f"alpha={alpha} K={K}")
    return OracleReport("tilde-alpha bound", not failures, worst, ", ".join(failures[:3]))


def random_connectivity_cases(
    seed: int = 0, cases: int = CONNECTIVITY_CASES
) -> Iterator[tuple[int, int, list[DiGraphRound]]]:
    """(n, B, rounds) with 2 <= n <= CONNECTIVITY_MAX_N and sparse random out-links."""
    gen = SeededRng(seed).stream(Stream.ORACLE, iteration=5)
    for _ in range(cases):
        n = int(gen.integers(2, CONNECTIVITY_MAX_N + 1))
        B = int(gen.integers(1, 4))
        T = B + int(gen.integers(0, 4))
        rounds = [
            from_out_neighbors(
                [np.flatnonzero(gen.random(n) < 0.25).tolist() for _ in range(n)]
            )
            for _ in range(T)
        ]
        yield n, B, rounds


def check_connectivity_oracle(seed: int = 0, cases: int = CONNECTIVITY_CASES) -> OracleReport:
    mismatches, witness = 0, ""
    for c, (n, B, rounds) in enumerate(random_connectivity_cases(seed, cases)):
        verdict = check_B_connectivity(rounds, B)
        ok, window = bfs_B_connectivity(rounds, B)
        if verdict.ok != ok or verdict.failing_window != window:
            mismatches += 1
            witness = witness or f"seed={seed} case={c} n={n} B={B}"
    return OracleReport("B-connectivity vs BFS", mismatches == 0, float(mismatches), witness)


def check_determinism(seed: int = 0) -> OracleReport:
    base = dict(
        n_clients=6,
        k_out=2,
        rounds=10,
        classes=3,
        per_class=20,
        features=4,
        local_iters=2,
        batch_size=8,
        seed=seed,
    )
    one = metrics_to_csv(run_experiment(ExperimentConfig(workers=1, **base)).metrics)
    four = metrics_to_csv(run_experiment(ExperimentConfig(workers=4, **base)).metrics)
    same = one == four
    return OracleReport("determinism across workers", same, 0.0 if same else 1.0, "" if same else f"seed={seed}")


CHECKS: list[tuple[str, Callable[[], OracleReport]]] = [
    ("column stochasticity", check_column_stochastic),
    ("mass conservation", check_mass_conservation),
    ("momentum closed form", check_momentum_closed_form),
    ("push-sum vs dense oracle", check_push_sum_vs_dense),
    ("rho=alpha=0 reduction", check_reduction),
    ("analytic gradients", check_gradients),
    ("quadratic optimum", check_quadratic_optimum),
    ("tilde-alpha bound", check_tilde_alpha),
    ("B-connectivity vs BFS", check_connectivity_oracle),
    ("determinism across workers", check_determinism),
]


def run_suite(on_report: Callable[[OracleReport], None] | None = None) -> list[OracleReport]:
    reports = []
    for name, check in CHECKS:
        started = time.perf_counter()
        try:
            report = check()
        except Exception as e:
            logger.exception("oracle %s crashed", name)
            report = OracleReport(name, False, math.inf, f"{type(e).__name__}: {e}")
        logger.debug("%s finished in %.2fs", name, time.perf_counter() - started)
        reports.append(report)
        if on_report is not None:
            on_report(report)
    return reports
