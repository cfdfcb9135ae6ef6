from __future__ import annotations

import os
import tempfile
from pathlib import Path


def get_app_dir() -> Path:
    """
    Returns directory for run outputs.

    - PUSHSUM_FL_HOME if set
    - otherwise repo root (run.py location)
    """
    env = os.environ.get("PUSHSUM_FL_HOME", "").strip()
    if env:
        return Path(env).expanduser().resolve()
    return Path(__file__).resolve().parents[1]


APP_DIR = get_app_dir()

RUNS_DIR = APP_DIR / "runs"
DEFAULT_CONFIG_FILE = APP_DIR / "experiment.json"

DATA_CACHE_DIR = Path(tempfile.gettempdir()) / "pushsum_fl_data"

MANIFEST_NAME = "manifest.json"
METRICS_NAME = "metrics.csv"
SWEEP_SUMMARY_NAME = "sweep.csv"
