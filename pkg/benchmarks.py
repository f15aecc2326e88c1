"""
Benchmark drivers: per-level membrane pipelines (cylinder, oblate spheroid),
coupled bulk/membrane beams, and the conditioning sweep.

Every driver takes a validated BenchmarkConfig and returns plain results;
writing files is left to the study orchestrator.
"""

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from analysis import (
    ConvergenceRow,
    attach_rates,
    cylinder_exact_tensor,
    cylinder_load,
    oblate_exact_tensor,
    oblate_load,
    recover_stress,
    stress_error_L2,
)
from assembly import (
    DofMap,
    LoadField,
    MembraneMaterial,
    SolutionField,
    SparseSystem,
    StabilizationParams,
    apply_dirichlet,
    assemble_boundary_traction,
    assemble_bulk,
    assemble_membrane,
    assemble_membrane_load,
    assemble_stabilization,
    couple,
    rigid_body_modes,
)
from background_mesh import BackgroundMesh, build_structured, jitter_interior, mesh_size
from benchmark_config import (
    BeamSettings,
    BenchmarkConfig,
    DirichletSettings,
    MembraneSettings,
    MeshSettings,
    SolverSettings,
)
from cut_geometry import CutSurface, extract_surface
from errors import MembraneCutFEMError
from level_set import (
    AXIS_INDEX,
    ActiveMesh,
    LevelSet,
    PlaneLevelSet,
    SphereLevelSet,
    classify,
    dirichlet_nodes,
    discretize,
)
from solver import SolveReport, estimate_condition, solve

logger = logging.getLogger(__name__)


def build_mesh(settings: MeshSettings, level: int) -> BackgroundMesh:
    nx, ny, nz = settings.refinements[level]
    mesh = build_structured(settings.box, nx, ny, nz, settings.kind)
    if settings.jitter > 0:
        mesh = jitter_interior(mesh, settings.jitter, settings.seed)
    return mesh


@dataclass(eq=False)
class MembraneSolution:
    mesh: BackgroundMesh
    active: ActiveMesh
    surface: CutSurface
    dofs: DofMap
    report: SolveReport
    field: SolutionField
    stress: np.ndarray
    material: MembraneMaterial
    timings: Dict[str, float] = field(default_factory=dict)


def solve_membrane(mesh: BackgroundMesh, level_set: LevelSet, material: MembraneMaterial, tau0: float,
                   dirichlet: Sequence[DirichletSettings], load: LoadField, solver: SolverSettings,
                   quadrature: str = "auto") -> MembraneSolution:
    """
    Mesh -> level set -> cut -> assemble -> solve -> recover stress for one membrane.

    Problems without Dirichlet nodes are solved orthogonally to the rigid-body modes.
    """
    timings = {}
    start = time.time()
    active = classify(discretize(level_set, mesh))
    constraints = [dirichlet_nodes(active, d.selector(), d.components, d.name) for d in dirichlet]
    surface = extract_surface(active, quadrature)
    timings["geometry"] = time.time() - start

    start = time.time()
    dofs = DofMap.for_band(active, constraints)
    system = SparseSystem(dofs)
    assemble_membrane(surface, material, dofs, system)
    assemble_stabilization(active, StabilizationParams(tau0), dofs, system)
    assemble_membrane_load(surface, load, dofs, system)
    constrained = apply_dirichlet(system, dofs)
    timings["assembly"] = time.time() - start

    start = time.time()
    nullspace = rigid_body_modes(dofs) if len(dofs.constrained) == 0 else None
    report = solve(constrained, solver.method, solver.tol, solver.max_iter, nullspace)
    timings["solve"] = time.time() - start

    u_h = SolutionField(dofs, report.x)
    stress = recover_stress(u_h, surface, material)
    return MembraneSolution(mesh, active, surface, dofs, report, u_h, stress, material, timings)


@dataclass(eq=False)
class LevelOutcome:
    row: ConvergenceRow
    solution: Optional[MembraneSolution] = None
    elapsed: float = 0.0


def _membrane_problem(config: BenchmarkConfig) -> tuple:
    """Load field and exact stress callable of a convergence benchmark."""
    mat = config.material
    if config.benchmark == "cylinder":
        cyl = config.cylinder
        axis = AXIS_INDEX[config.levelset.axis]
        load = LoadField(surface=lambda x: cylinder_load(x, cyl.F, cyl.r, cyl.L, axis))

        def exact(points, normals):
            return cylinder_exact_tensor(points, normals, cyl.F, cyl.r, mat.t, cyl.L, axis)

        return load, exact
    if config.benchmark == "oblate":
        load = LoadField(surface=lambda x: oblate_load(x, mat.E, mat.nu))

        def exact(points, normals):
            return oblate_exact_tensor(points, normals, mat.E, mat.nu)

        return load, exact
    raise ValueError(f"Benchmark '{config.benchmark}' is not a convergence study")


def run_level(config: BenchmarkConfig, level: int) -> LevelOutcome:
    """
    Run one refinement level. Failures are recorded on the row instead of raised.
    """
    start = time.time()
    mesh = build_mesh(config.mesh, level)
    row = ConvergenceRow(level=level, h=mesh_size(mesh), nno=mesh.n_vertices, ndof=0, error=None)
    try:
        load, exact = _membrane_problem(config)
        solution = solve_membrane(
            mesh, config.levelset.build(), config.material.membrane(), config.stabilization.tau0,
            config.dirichlet, load, config.solver, config.quadrature,
        )
        row.ndof = solution.dofs.n_dofs
        row.error = stress_error_L2(solution.stress, exact, solution.surface)
        row.iterations = solution.report.iterations
        row.converged = solution.report.converged
        row.message = "ok" if solution.report.converged else "solver did not converge"
        logger.info("%s level %d: h=%.4f ndof=%d error=%.4e", config.name, level, row.h, row.ndof, row.error)
        return LevelOutcome(row, solution, time.time() - start)
    except (MembraneCutFEMError, ValueError, np.linalg.LinAlgError) as e:
        logger.warning("%s level %d failed: %s", config.name, level, e)
        row.success = False
        row.message = f"Error: {e}"
        return LevelOutcome(row, None, time.time() - start)


def convergence_study(config: BenchmarkConfig, parallel: bool = False,
                      on_level: Optional[Callable[[LevelOutcome], None]] = None) -> List[LevelOutcome]:
    """
    Run every refinement level and attach convergence rates.

    Args:
        config: Cylinder or oblate configuration
        parallel: Run levels in worker threads
        on_level: Called with each finished level (from the worker thread)

    Returns:
        Outcomes in level order
    """
    levels = range(len(config.mesh.refinements))
    outcomes: Dict[int, LevelOutcome] = {}
    outcomes_lock = threading.Lock()

    def run_single_level(level: int):
        outcome = run_level(config, level)
        with outcomes_lock:
            outcomes[level] = outcome
            if on_level is not None:
                on_level(outcome)

    if parallel:
        threads = [threading.Thread(target=run_single_level, args=(level,)) for level in levels]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
    else:
        for level in levels:
            run_single_level(level)

    ordered = [outcomes[level] for level in levels]
    attach_rates([outcome.row for outcome in ordered])
    return ordered


@dataclass(eq=False)
class CoupledSolution:
    mesh: BackgroundMesh
    dofs: DofMap
    report: SolveReport
    field: SolutionField
    loaded_area: float
    mean_displacement: float
    surfaces: Dict[str, CutSurface] = field(default_factory=dict)


def solve_coupled(mesh: BackgroundMesh, beam: BeamSettings, membranes: Sequence[MembraneSettings],
                  solver: SolverSettings) -> CoupledSolution:
    """
    Bulk elasticity on every mesh node plus the stiffness of each embedded membrane.

    The reported mean displacement is the load-weighted mean along the traction
    direction, l(u) / (|traction| * loaded area).
    """
    clamp = dirichlet_nodes(mesh, beam.clamp.selector(), beam.clamp.components, beam.clamp.name)
    dofs = DofMap.for_mesh(mesh, [clamp])
    bulk = SparseSystem(dofs)
    assemble_bulk(mesh, beam.bulk.bulk(), dofs, bulk)
    traction = np.asarray(beam.traction, dtype=float)
    area = assemble_boundary_traction(mesh, beam.load_face.selector(), traction, dofs, bulk)

    parts, surfaces = [], {}
    for membrane in membranes:
        active = classify(discretize(membrane.levelset.build(), mesh))
        surface = extract_surface(active)
        part = SparseSystem(dofs)
        assemble_membrane(surface, membrane.material.membrane(), dofs, part)
        assemble_stabilization(active, StabilizationParams(beam.membrane_tau0), dofs, part)
        parts.append(part)
        surfaces[membrane.name] = surface
        logger.info("Membrane %s: %d triangles, area %.4f", membrane.name, surface.n_triangles, surface.total_area)

    system = apply_dirichlet(couple(bulk, parts), dofs)
    report = solve(system, solver.method, solver.tol, solver.max_iter)
    work = float(bulk.rhs @ report.x)
    mean = work / (np.linalg.norm(traction) * area) if area > 0 else 0.0
    return CoupledSolution(mesh, dofs, report, SolutionField(dofs, report.x), area, mean, surfaces)


def beam_study(config: BenchmarkConfig) -> dict:
    """
    Solve the beam without and with its membranes.

    Returns:
        Dictionary with both solutions and the mean loaded-face displacements
    """
    if config.beam is None:
        raise ValueError(f"Benchmark '{config.benchmark}' has no beam section")
    mesh = build_mesh(config.mesh, len(config.mesh.refinements) - 1)
    baseline = solve_coupled(mesh, config.beam, [], config.solver)
    stiffened = solve_coupled(mesh, config.beam, config.beam.membranes, config.solver)
    logger.info("Mean loaded-face displacement: baseline %.6e, with membranes %.6e",
                baseline.mean_displacement, stiffened.mean_displacement)
    return {
        "baseline": baseline,
        "stiffened": stiffened,
        "baseline_mean": baseline.mean_displacement,
        "stiffened_mean": stiffened.mean_displacement,
        "ratio": stiffened.mean_displacement / baseline.mean_displacement if baseline.mean_displacement else None,
        "stiffer": stiffened.mean_displacement < baseline.mean_displacement,
    }


def stiffened_beam(config: BenchmarkConfig) -> dict:
    if config.benchmark != "stiffened-beam":
        raise ValueError(f"Expected a stiffened-beam configuration, got '{config.benchmark}'")
    return beam_study(config)


def bending_beam(config: BenchmarkConfig) -> dict:
    if config.benchmark != "bending-beam":
        raise ValueError(f"Expected a bending-beam configuration, got '{config.benchmark}'")
    return beam_study(config)


def sweep_level_set(config: BenchmarkConfig, mesh: BackgroundMesh, offset: float) -> LevelSet:
    """Surface placed ``offset`` mesh spacings beyond a plane of nodes (or a node, for the sphere)."""
    sweep = config.sweep
    spacing = mesh.spacing
    if sweep.variant == "plane":
        return PlaneLevelSet(normal=(0.0, 0.0, 1.0), offset=sweep.node_coordinate + offset * spacing[2])
    center = tuple(config.levelset.center) if config.levelset and config.levelset.center else (0.5, 0.5, 0.5)
    return SphereLevelSet(center=center, radius=sweep.sphere_radius + offset * spacing[0])


def _side_clamps(mesh: BackgroundMesh) -> List[DirichletSettings]:
    (x0, y0, _), (x1, y1, _) = mesh.box
    return [
        DirichletSettings(axis="x", value=float(x0), tag="side_x0"),
        DirichletSettings(axis="x", value=float(x1), tag="side_x1"),
        DirichletSettings(axis="y", value=float(y0), tag="side_y0"),
        DirichletSettings(axis="y", value=float(y1), tag="side_y1"),
    ]


def membrane_operator(active: ActiveMesh, material: MembraneMaterial, tau0: float,
                      dirichlet: Sequence[DirichletSettings] = (),
                      components: Sequence[str] = ("x", "y", "z")) -> tuple:
    """
    Membrane plus stabilization matrix restricted to the free dofs, and its dof map.

    Only the displacement ``components`` are kept; a flat membrane carries no
    stiffness normal to its plane, so those rows are dropped for the plane sweep.
    """
    constraints = [dirichlet_nodes(active, d.selector(), d.components, d.name) for d in dirichlet]
    surface = extract_surface(active)
    dofs = DofMap.for_band(active, constraints)
    system = SparseSystem(dofs)
    assemble_membrane(surface, material, dofs, system)
    assemble_stabilization(active, StabilizationParams(tau0), dofs, system)
    kept = [AXIS_INDEX[c] for c in components]
    free = dofs.free_mask & np.isin(np.arange(dofs.n_dofs) % 3, kept)
    return system.matrix[free][:, free].tocsr(), dofs


def conditioning_sweep(config: BenchmarkConfig) -> List[dict]:
    """
    Condition number estimates against the cut offset, with and without stabilization.

    Returns:
        One row per (offset, tau0) with the eigenvalue estimates; kappa is
        infinite when the inverse iteration could not solve
    """
    sweep = config.sweep
    mesh = build_mesh(config.mesh, 0)
    material = config.material.membrane()
    if sweep.variant == "plane":
        dirichlet, components = _side_clamps(mesh), ("x", "y")
    else:
        dirichlet, components = [], ("x", "y", "z")
    rows = []
    for offset in sweep.offsets:
        active = classify(discretize(sweep_level_set(config, mesh, offset), mesh))
        for tau0 in sweep.tau0_values:
            start = time.time()
            matrix, dofs = membrane_operator(active, material, tau0, dirichlet, components)
            nullspace = rigid_body_modes(dofs) if sweep.variant == "sphere" else None
            estimate = estimate_condition(matrix, iters=sweep.condition_iters, nullspace=nullspace)
            rows.append({
                "offset": offset,
                "tau0": tau0,
                "lambda_max": estimate.lambda_max,
                "lambda_min": estimate.lambda_min,
                "kappa": estimate.kappa_or_inf,
                "lower_bound": estimate.lower_bound,
                "ndof": int(matrix.shape[0]),
                "elapsed": round(time.time() - start, 3),
            })
            logger.info("offset %.1e tau0 %g: kappa %.3e%s", offset, tau0, estimate.kappa,
                        " (lower bound)" if estimate.lower_bound else "")
    return rows


def sweep_summary(rows: Sequence[dict]) -> Dict[float, dict]:
    """Spread max(kappa) / min(kappa) over the offsets, per tau0."""
    summary = {}
    for tau0 in sorted({row["tau0"] for row in rows}, reverse=True):
        kappas = [row["kappa"] for row in rows if row["tau0"] == tau0]
        finite = [k for k in kappas if np.isfinite(k)]
        spread = max(kappas) / min(kappas) if finite and min(kappas) > 0 else float("inf")
        summary[tau0] = {"min": min(kappas), "max": max(kappas), "spread": spread,
                         "failed": sum(1 for k in kappas if not np.isfinite(k))}
    return summary
