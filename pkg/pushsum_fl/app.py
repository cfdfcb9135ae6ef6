# pushsum_fl/app.py
from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Optional, Sequence

import requests
from pydantic import ValidationError

from pushsum_fl.config import SWEEP_GRIDS
from pushsum_fl.downloader import Downloader
from pushsum_fl.errors import PushSumFLError
from pushsum_fl.experiment import ExperimentConfig, run_experiment, sweep, topology_check
from pushsum_fl.models import OracleReport, RoundMetrics
from pushsum_fl.paths import DATA_CACHE_DIR, DEFAULT_CONFIG_FILE, RUNS_DIR
from pushsum_fl.protocol import AlgorithmKind
from pushsum_fl.verify import run_suite

logger = logging.getLogger(__name__)

# argparse dest -> ExperimentConfig field
_OVERRIDES = (
    "algorithm",
    "n_clients",
    "k_out",
    "participation",
    "topology",
    "topology_kind",
    "window_b",
    "rounds",
    "eta_l0",
    "lr_decay",
    "rho",
    "alpha",
    "local_iters",
    "local_epochs",
    "batch_size",
    "data",
    "model",
    "hidden",
    "idx_dir",
    "limit",
    "test_limit",
    "dirichlet_alpha",
    "seed",
    "workers",
)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON experiment file")
    p.add_argument("--reference-defaults", action="store_true", help="100 clients, batch 128, 5 local epochs")
    p.add_argument("--algorithm", choices=[a.value for a in AlgorithmKind])
    p.add_argument("--n-clients", type=int)
    p.add_argument("--k-out", type=int)
    p.add_argument("--participation", type=float)
    p.add_argument(
        "--topology",
        choices=["directed-ring", "directed-erdos-renyi", "complete", "symmetric", "star"],
    )
    p.add_argument("--topology-kind", choices=["static", "time-varying"])
    p.add_argument("-B", "--window-b", type=int)
    p.add_argument("-T", "--rounds", type=int)
    p.add_argument("--eta-l0", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("-K", "--local-iters", type=int)
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--data", choices=["synthetic", "idx", "quadratic"])
    p.add_argument("--model", choices=["quadratic", "logistic", "mlp"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--idx-dir", type=Path)
    p.add_argument("--limit", type=int)
    p.add_argument("--test-limit", type=int)
    p.add_argument("--dirichlet-alpha", type=float)
    p.add_argument("--iid", action="store_true", help="IID split instead of Dirichlet")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--record-timing", action="store_true")
    p.add_argument("--require-connectivity", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pushsum-fl",
        description="Decentralized federated learning over time-varying digraphs",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one configuration")
    _add_config_args(p_run)
    p_run.add_argument("--print-every", type=int, default=10)

    p_sweep = sub.add_parser("sweep", help="grid over one hyper-parameter")
    _add_config_args(p_sweep)
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", type=float, nargs="+")

    p_topo = sub.add_parser("topology-check", help="B-connectivity of the generated schedule")
    _add_config_args(p_topo)

    sub.add_parser("verify", help="run the oracle suite")

    p_fetch = sub.add_parser("fetch-mnist", help="download the MNIST IDX files")
    p_fetch.add_argument("--dir", type=Path, default=DATA_CACHE_DIR)
    return parser


def config_from_args(args: argparse.Namespace, *, default_out: Optional[Path] = None) -> ExperimentConfig:
    overrides: dict[str, Any] = {k: getattr(args, k, None) for k in _OVERRIDES}
    if args.record_timing:
        overrides["record_timing"] = True
    if args.require_connectivity:
        overrides["require_connectivity"] = True
    overrides["out"] = args.out

    if args.reference_defaults:
        algo = overrides.pop("algorithm") or AlgorithmKind.DFEDSGPSM
        cfg = ExperimentConfig.reference_defaults(algo, **{k: v for k, v in overrides.items() if v is not None})
    else:
        cfg = ExperimentConfig.from_file(args.config or DEFAULT_CONFIG_FILE, **overrides)

    update: dict[str, Any] = {}
    if args.iid:
        update["dirichlet_alpha"] = None
    if cfg.out is None and default_out is not None:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        update["out"] = default_out / f"{cfg.algorithm.value}-seed{cfg.seed}-{stamp}"
    if update:
        cfg = ExperimentConfig.model_validate({**cfg.model_dump(), **update})
    return cfg


# ======================================================================
# COMMANDS
# ======================================================================


def cmd_run(args: argparse.Namespace) -> int:
    cfg = config_from_args(args, default_out=RUNS_DIR)
    every = max(1, args.print_every)
    print(f"▶ {cfg.algorithm.value}: {cfg.n_clients} clients, {cfg.rounds} rounds, seed {cfg.seed}")

    def on_round(m: RoundMetrics) -> None:
        if m.round % every == 0 or m.round == cfg.rounds:
            print(
                f"  round {m.round:>4}  loss={m.train_loss:.4f}  acc={m.test_accuracy:.4f}  "
                f"|grad|^2={m.grad_norm_sq:.3e}  consensus={m.consensus_error:.3e}"
            )

    result = run_experiment(cfg, on_round=on_round)
    last = result.metrics[-1]
    if result.connectivity_failures:
        print(f"⚠️ {result.connectivity_failures} windows were not strongly connected")
    print(f"✅ done: test accuracy {last.test_accuracy:.4f} -> {cfg.out}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = config_from_args(args, default_out=RUNS_DIR / f"sweep-{args.param}")
    values = args.values or SWEEP_GRIDS.get(args.param)
    if not values:
        print(f"❌ no preset grid for '{args.param}', pass --values")
        return 2
    print(f"▶ sweep {args.param} over {list(values)}")

    def on_run(row: Any) -> None:
        print(f"  {row.param}={row.value:g}  acc={row.final_accuracy:.4f}  |grad|^2={row.final_grad_norm_sq:.3e}")

    sweep(cfg, args.param, values, on_run=on_run)
    print(f"✅ sweep written to {cfg.out}")
    return 0


def cmd_topology_check(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    verdict, residual = topology_check(cfg)
    sched = cfg.schedule()
    print(
        f"▶ {sched.generator} ({sched.kind}), n={cfg.n_clients}, k_out={sched.effective_k_out}, "
        f"B={cfg.window_b}, {verdict.n_windows} windows"
    )
    print(f"  max column residual {residual:.3e}")
    if verdict:
        print("✅ every window is strongly connected")
        return 0
    print(f"❌ window starting at round {verdict.failing_window} is not strongly connected")
    return 1


def cmd_verify(args: argparse.Namespace) -> int:
    def on_report(r: OracleReport) -> None:
        print(("✅ " if r.passed else "❌ ") + r.line())

    reports = run_suite(on_report=on_report)
    failed = [r for r in reports if not r.passed]
    if failed:
        print(f"❌ {len(failed)} of {len(reports)} checks failed")
        return 1
    print(f"✅ all {len(reports)} checks passed")
    return 0


def cmd_fetch_mnist(args: argparse.Namespace) -> int:
    Downloader.cleanup_partial(args.dir)
    dl = Downloader(args.dir)
    out = dl.fetch_mnist(on_file=lambda p: print(f"  {p.name}"))
    print(f"✅ MNIST in {out} (use --data idx --idx-dir {out})")
    return 0


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "topology-check": cmd_topology_check,
    "verify": cmd_verify,
    "fetch-mnist": cmd_fetch_mnist,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:2] == ["topology", "check"]:
        argv = ["topology-check", *argv[2:]]

    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"❌ invalid config: {e}")
        return 2
    except (PushSumFLError, OSError, requests.RequestException, ValueError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"❌ {type(e).__name__}: {e}")
        return 1
