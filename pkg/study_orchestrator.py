import csv
import json
import math
import os
import time
from datetime import datetime
from typing import Any, Dict, List, Optional

import numpy as np

from analysis import displacement_at
from benchmark_config import BenchmarkConfig
from benchmarks import (
    LevelOutcome,
    bending_beam,
    conditioning_sweep,
    convergence_study,
    stiffened_beam,
    sweep_summary,
)
from level_set import AXIS_INDEX
from tangential_ops import projector
from vtk_io import triangle_average, write_mesh_vtk, write_surface_vtk

CONVERGENCE_COLUMNS = ["h", "nno", "ndof", "error", "rate", "message"]
SWEEP_COLUMNS = ["offset", "tau0", "lambda_max", "lambda_min", "kappa", "lower_bound", "ndof"]


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class StudyOrchestrator:
    """
    Runs one benchmark configuration end to end and saves its outputs
    (CSV table, JSON run log, VTK files) into a timestamped batch folder.
    """

    def __init__(self, config: BenchmarkConfig, out_dir: str = "runs", deterministic: bool = False):
        """
        Initialize the study orchestrator.

        Args:
            config: Validated benchmark configuration
            out_dir: Root folder receiving batch_<timestamp> folders
            deterministic: Run refinement levels sequentially
        """
        self.config = config
        self.out_dir = out_dir
        self.deterministic = deterministic
        self.batch_folder: Optional[str] = None
        self.stage_times: List[Dict[str, float]] = []
        self.files: List[str] = []
        self.run_start: Optional[str] = None

    def run(self) -> Dict[str, Any]:
        """
        Run the configured benchmark.

        Returns:
            Dictionary with study results and metadata
        """
        batch_timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        self.batch_folder = os.path.join(self.out_dir, f"batch_{batch_timestamp}", self.config.name)
        os.makedirs(self.batch_folder, exist_ok=True)
        self.run_start = datetime.now().isoformat()

        print(f"Starting {self.config.benchmark} study '{self.config.name}'")
        print("=" * 60)
        for note in self.config.deviations():
            print(f"Deviation: {note}")

        runners = {
            "cylinder": self._run_convergence,
            "oblate": self._run_convergence,
            "stiffened-beam": self._run_beam,
            "bending-beam": self._run_beam,
            "conditioning-sweep": self._run_sweep,
        }
        try:
            return runners[self.config.benchmark]()
        except Exception as e:
            print(f"Study failed: {e}")
            return self._create_result_dict(False, f"Error: {e}", [])

    def _run_convergence(self) -> Dict[str, Any]:
        def report(outcome: LevelOutcome):
            row = outcome.row
            if row.success:
                print(f"[level {row.level}] h={row.h:.4f} nno={row.nno} ndof={row.ndof} "
                      f"error={row.error:.4e} (Time: {outcome.elapsed:.3f}s)")
            else:
                print(f"[level {row.level}] {row.message}")

        outcomes = convergence_study(self.config, parallel=not self.deterministic, on_level=report)
        rows = [outcome.row for outcome in outcomes]
        for outcome in outcomes:
            if outcome.solution is not None:
                self.stage_times.append(dict(outcome.solution.timings))
                if self.config.output.vtk:
                    self._write_membrane_vtk(outcome)

        print("-" * 60)
        print(f"{'h':>10} {'nno':>8} {'ndof':>8} {'error':>12} {'rate':>8}")
        for row in rows:
            error = f"{row.error:.4e}" if row.error is not None else "-"
            rate = f"{row.rate:.4f}" if row.rate is not None else "-"
            print(f"{row.h:>10.4f} {row.nno:>8d} {row.ndof:>8d} {error:>12} {rate:>8}")

        if self.config.output.csv:
            self._write_csv("convergence.csv", CONVERGENCE_COLUMNS, [row.to_csv_dict() for row in rows])
        successful = sum(1 for row in rows if row.success)
        message = f"Convergence study completed: {successful}/{len(rows)} levels successful"
        print(message)
        return self._create_result_dict(successful == len(rows), message, [row.to_dict() for row in rows])

    def _write_membrane_vtk(self, outcome: LevelOutcome):
        solution = outcome.solution
        level = outcome.row.level
        surface = solution.surface
        stress = solution.stress
        P = projector(surface.qp_normals)
        axis_index = AXIS_INDEX[self.config.levelset.axis] if self.config.benchmark == "cylinder" else 0
        a = P[:, :, axis_index].copy()
        a /= np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-300)
        axial = np.einsum("qi,qij,qj->q", a, stress, a)
        norm = np.sqrt(np.einsum("qij,qij->q", stress, stress))
        cell_data = {
            "stress_norm": triangle_average(surface, norm),
            "axial_stress": triangle_average(surface, axial),
            "displacement": triangle_average(surface, displacement_at(solution.field, surface)),
        }
        self.files.append(write_surface_vtk(os.path.join(self.batch_folder, f"surface_level{level}.vtk"),
                                            surface, cell_data))
        nodal = np.zeros((solution.mesh.n_vertices, 3))
        nodal[solution.dofs.nodes] = solution.field.nodal()
        self.files.append(write_mesh_vtk(os.path.join(self.batch_folder, f"band_level{level}.vtk"),
                                         solution.mesh, solution.active.cells, {"displacement": nodal}))

    def _run_beam(self) -> Dict[str, Any]:
        start = time.time()
        driver = stiffened_beam if self.config.benchmark == "stiffened-beam" else bending_beam
        result = driver(self.config)
        self.stage_times.append({"solve": time.time() - start})
        print(f"Baseline mean loaded-face displacement:       {result['baseline_mean']:.6e}")
        print(f"With {len(self.config.beam.membranes)} membrane(s) mean displacement:  {result['stiffened_mean']:.6e}")

        if self.config.output.vtk:
            for label in ("baseline", "stiffened"):
                solution = result[label]
                self.files.append(write_mesh_vtk(os.path.join(self.batch_folder, f"{label}.vtk"), solution.mesh,
                                                 point_data={"displacement": solution.field.nodal()}))
            for name, surface in result["stiffened"].surfaces.items():
                self.files.append(write_surface_vtk(os.path.join(self.batch_folder, f"membrane_{name}.vtk"), surface))

        rows = [{
            "baseline_mean": result["baseline_mean"],
            "stiffened_mean": result["stiffened_mean"],
            "ratio": result["ratio"],
            "stiffer": result["stiffer"],
            "baseline_solver": result["baseline"].report.summary(),
            "stiffened_solver": result["stiffened"].report.summary(),
        }]
        success = result["baseline"].report.converged and result["stiffened"].report.converged
        message = "Membranes stiffen the beam" if result["stiffer"] else "Membranes did not reduce the displacement"
        print(message)
        return self._create_result_dict(success, message, rows)

    def _run_sweep(self) -> Dict[str, Any]:
        start = time.time()
        rows = conditioning_sweep(self.config)
        self.stage_times.append({"solve": time.time() - start})
        print(f"{'offset':>10} {'tau0':>6} {'kappa':>12}")
        for row in rows:
            flag = " (lower bound)" if row["lower_bound"] else ""
            print(f"{row['offset']:>10.1e} {row['tau0']:>6g} {row['kappa']:>12.4e}{flag}")
        if self.config.output.csv:
            self._write_csv("conditioning.csv", SWEEP_COLUMNS, rows)
        summary = sweep_summary(rows)
        for tau0, spread in summary.items():
            print(f"tau0={tau0:g}: kappa spread {spread['spread']:.3e} ({spread['failed']} failed solves)")
        result = self._create_result_dict(True, "Conditioning sweep completed", rows)
        result["summary"] = _json_safe(summary)
        return result

    def _write_csv(self, filename: str, columns: List[str], rows: List[Dict[str, Any]]):
        filepath = os.path.join(self.batch_folder, filename)
        with open(filepath, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({key: ("" if row.get(key) is None else row.get(key)) for key in columns})
        self.files.append(filepath)
        print(f"Table saved to: {filepath}")

    def _create_result_dict(self, success: bool, message: str, rows: List[Dict[str, Any]]) -> Dict[str, Any]:
        """
        Create a standardized result dictionary and save it as the JSON run log.

        Args:
            success: Whether every stage of the study succeeded
            message: Result message
            rows: Per-level (or per-case) result rows

        Returns:
            Dictionary with study results
        """
        result = {
            "success": success,
            "message": message,
            "benchmark": self.config.benchmark,
            "name": self.config.name,
            "batch_folder": self.batch_folder,
            "run_start": self.run_start,
            "run_end": datetime.now().isoformat(),
            "deterministic": self.deterministic,
            "deviations": self.config.deviations(),
            "config": self.config.model_dump(mode="json"),
            "rows": _json_safe(rows),
            "files": list(self.files),
            "timing_statistics": self._calculate_timing_stats(),
        }
        if self.config.output.json_log and self.batch_folder:
            filepath = os.path.join(self.batch_folder, "run_log.json")
            with open(filepath, "w", encoding="utf-8") as f:
                json.dump(result, f, indent=2)
            result["saved_filepath"] = filepath
            print(f"Run log saved to: {filepath}")
        return result

    def _calculate_timing_stats(self) -> Dict[str, Any]:
        """
        Calculate timing statistics over the recorded pipeline stages.

        Returns:
            Dictionary with per-stage totals, averages and extremes
        """
        stages: Dict[str, List[float]] = {}
        for entry in self.stage_times:
            for stage, seconds in entry.items():
                stages.setdefault(stage, []).append(seconds)

        stats = {"total_runs": len(self.stage_times)}
        for stage, times in stages.items():
            stats[stage] = {
                "total_time_seconds": round(sum(times), 3),
                "average_time_seconds": round(sum(times) / len(times), 3),
                "min_time_seconds": round(min(times), 3),
                "max_time_seconds": round(max(times), 3),
            }
        return stats
