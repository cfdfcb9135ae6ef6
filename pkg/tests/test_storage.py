from __future__ import annotations

import pytest

from pushsum_fl.errors import StorageError
from pushsum_fl.storage import load_json, save_json


def test_missing_file_returns_default(tmp_path):
    assert load_json(tmp_path / "nope.json", {"a": 1}) == {"a": 1}


def test_save_then_load(tmp_path):
    path = tmp_path / "deep" / "cfg.json"
    save_json(path, {"rho": 0.1, "alpha": 0.9})
    assert load_json(path, None) == {"alpha": 0.9, "rho": 0.1}


def test_corrupt_file_raises(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(StorageError):
        load_json(path, {})


def test_unserialisable_payload_raises(tmp_path):
    with pytest.raises(StorageError):
        save_json(tmp_path / "x.json", {"obj": object()})
