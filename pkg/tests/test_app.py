from __future__ import annotations

import pytest

from pushsum_fl import app
from pushsum_fl.metrics_io import load_metrics
from pushsum_fl.models import OracleReport
from pushsum_fl.paths import METRICS_NAME, SWEEP_SUMMARY_NAME

SMALL = [
    "--n-clients", "5", "--k-out", "2", "-T", "3", "-K", "2", "--batch-size", "8",
]


def test_run_command(tmp_path, capsys):
    out = tmp_path / "run"
    code = app.main(["run", *SMALL, "--config", str(tmp_path / "none.json"), "--out", str(out)])
    assert code == 0
    assert len(load_metrics(out / METRICS_NAME)) == 4
    text = capsys.readouterr().out
    assert text.startswith("▶ DFedSGPSM")
    assert "✅" in text


def test_invalid_config_exits_nonzero(tmp_path, capsys):
    code = app.main(["run", "--config", str(tmp_path / "none.json"), "--alpha", "1.5", "--out", str(tmp_path / "x")])
    assert code == 2
    assert "❌" in capsys.readouterr().out


def test_topology_check_with_space(tmp_path, capsys):
    code = app.main(["topology", "check", "--config", str(tmp_path / "none.json"), "--topology", "directed-ring", "--n-clients", "5"])
    assert code == 0
    assert "strongly connected" in capsys.readouterr().out


def test_topology_check_failure_exit_code(tmp_path, capsys):
    code = app.main(
        ["topology-check", "--config", str(tmp_path / "none.json"), "--n-clients", "2",
         "--k-out", "1", "--topology", "star", "-T", "2"]
    )
    out = capsys.readouterr().out
    assert code == 1 and "❌" in out


def test_sweep_command(tmp_path):
    code = app.main(
        ["sweep", *SMALL, "--config", str(tmp_path / "none.json"), "--param", "rho",
         "--values", "0.0", "0.2", "--out", str(tmp_path)]
    )
    assert code == 0
    assert (tmp_path / SWEEP_SUMMARY_NAME).exists()


def test_verify_exit_code_follows_reports(monkeypatch, capsys):
    monkeypatch.setattr(app, "run_suite", lambda on_report=None: [OracleReport("x", True, 0.0)])
    assert app.main(["verify"]) == 0
    monkeypatch.setattr(app, "run_suite", lambda on_report=None: [OracleReport("x", False, 1.0, "seed=0")])
    assert app.main(["verify"]) == 1
    assert "1 of 1 checks failed" in capsys.readouterr().out


def test_fetch_mnist_uses_downloader(tmp_path, monkeypatch, capsys):
    calls = []

    def fake_fetch(self, name, timeout=60):
        calls.append(name)
        path = self.cache_dir / name
        path.write_bytes(b"x")
        return path

    monkeypatch.setattr(app.Downloader, "fetch", fake_fetch)
    assert app.main(["fetch-mnist", "--dir", str(tmp_path)]) == 0
    assert len(calls) == 4
    assert "✅" in capsys.readouterr().out


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        app.main(["train"])
