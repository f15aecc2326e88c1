import csv
import json
import os

import pytest

from extract_results import extract_results_to_csv, is_valid_run_log


def convergence_log(**overrides):
    data = {
        "benchmark": "cylinder",
        "name": "cylinder_tet",
        "run_start": "2025-01-01T10:00:00",
        "run_end": "2025-01-01T10:05:00",
        "rows": [
            {"level": 0, "h": 0.2, "nno": 100, "ndof": 90, "error": 0.05, "rate": None, "success": True},
            {"level": 1, "h": 0.1, "nno": 700, "ndof": 360, "error": 0.02, "rate": 1.32, "success": True},
            {"level": 2, "h": 0.05, "nno": 5000, "ndof": 0, "error": None, "rate": None, "success": False},
        ],
    }
    data.update(overrides)
    return data


def write_log(root, batch, name, data):
    folder = os.path.join(root, batch, name)
    os.makedirs(folder, exist_ok=True)
    with open(os.path.join(folder, "run_log.json"), "w", encoding="utf-8") as f:
        json.dump(data, f)


class TestIsValidRunLog:
    def test_valid(self):
        assert is_valid_run_log(convergence_log())

    def test_missing_timestamps(self):
        assert not is_valid_run_log(convergence_log(run_end=None))

    def test_no_rows(self):
        assert not is_valid_run_log(convergence_log(rows=[]))

    def test_all_levels_failed(self):
        rows = [{"level": 0, "h": 0.2, "nno": 100, "error": None, "success": False}]
        assert not is_valid_run_log(convergence_log(rows=rows))

    def test_sweep_rows_need_no_mesh_size(self):
        rows = [{"offset": 0.5, "tau0": 1.0, "kappa": 120.0}]
        assert is_valid_run_log(convergence_log(benchmark="conditioning-sweep", name="conditioning_plane", rows=rows))


def test_extract(tmp_path):
    root = str(tmp_path / "runs")
    write_log(root, "batch_20250101_100000", "cylinder_tet", convergence_log())
    write_log(root, "batch_20250101_110000", "conditioning_plane", convergence_log(
        benchmark="conditioning-sweep", name="conditioning_plane",
        rows=[{"offset": 0.5, "tau0": 1.0, "kappa": 120.0, "ndof": 75}, {"offset": 0.01, "tau0": 0.0, "kappa": "inf"}],
    ))
    write_log(root, "batch_20250101_120000", "broken", convergence_log(run_start=None))
    os.makedirs(os.path.join(root, "batch_20250101_130000", "garbled"))
    with open(os.path.join(root, "batch_20250101_130000", "garbled", "run_log.json"), "w", encoding="utf-8") as f:
        f.write("{not json")

    output = str(tmp_path / "results.csv")
    written, skipped = extract_results_to_csv(root, output)
    assert (written, skipped) == (4, 2)

    with open(output, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [row["benchmark"] for row in rows] == ["cylinder", "cylinder", "conditioning-sweep", "conditioning-sweep"]
    assert rows[0]["batch"] == "batch_20250101_100000"
    assert rows[0]["rate"] == ""
    assert float(rows[1]["rate"]) == pytest.approx(1.32)
    assert float(rows[2]["h"]) == 0.5
    assert rows[3]["error"] == "inf"


def test_empty_directory(tmp_path):
    output = str(tmp_path / "results.csv")
    assert extract_results_to_csv(str(tmp_path), output) == (0, 0)
    with open(output, encoding="utf-8") as f:
        assert f.read().strip() == ",".join(
            ["benchmark", "name", "batch", "level", "h", "nno", "ndof", "error", "rate"])
