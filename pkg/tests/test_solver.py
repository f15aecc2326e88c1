"""Tests for the conjugate gradient and direct solvers and the condition estimate."""

import numpy as np
import pytest
import scipy.sparse as sp

from assembly import (
    DofMap,
    LoadField,
    MembraneMaterial,
    SparseSystem,
    StabilizationParams,
    apply_dirichlet,
    assemble_membrane,
    assemble_membrane_load,
    assemble_stabilization,
)
from background_mesh import build_structured
from cut_geometry import extract_surface
from errors import ContractViolation
from level_set import PlaneSelector, dirichlet_nodes
from solver import estimate_condition, pcg, solve, solve_cg, solve_direct

SPD_3x3 = np.array([[4.0, 1.0, 0.0], [1.0, 3.0, 0.0], [0.0, 0.0, 2.0]])


def laplacian(n, neumann=False):
    """1D second-difference matrix; the Neumann version has the constant vector as kernel."""
    main = np.full(n, 2.0)
    if neumann:
        main[[0, -1]] = 1.0
    return sp.diags([-np.ones(n - 1), main, -np.ones(n - 1)], [-1, 0, 1], format="csr")


@pytest.fixture
def small_system():
    mesh = build_structured(((0, 0, 0), (1, 1, 1)), 1, 1, 1, "hex8")
    dofs = DofMap(mesh, np.array([0]))
    return SparseSystem(dofs, sp.csr_matrix(SPD_3x3), np.array([1.0, 2.0, 2.0]))


# =============================================================================
# Conjugate gradients
# =============================================================================


class TestPCG:
    def test_three_by_three(self):
        report = pcg(sp.csr_matrix(SPD_3x3), np.array([1.0, 2.0, 2.0]))
        assert report.converged
        assert np.allclose(report.x, [1.0 / 11.0, 7.0 / 11.0, 1.0], atol=1e-10)

    def test_identity_one_iteration(self, rng):
        b = rng.normal(size=10)
        report = pcg(sp.identity(10, format="csr"), b)
        assert report.iterations == 1
        assert np.allclose(report.x, b)

    def test_diagonal_one_iteration(self):
        report = pcg(sp.diags([1.0, 5.0, 9.0, 0.5], format="csr"), np.array([1.0, 1.0, 1.0, 1.0]))
        assert report.iterations == 1
        assert np.allclose(report.x, [1.0, 0.2, 1.0 / 9.0, 2.0])

    def test_zero_rhs(self):
        report = pcg(laplacian(5), np.zeros(5))
        assert report.converged
        assert report.iterations == 0
        assert not np.any(report.x)

    def test_converged_means_tolerance_met(self, rng):
        A = laplacian(60)
        b = rng.normal(size=60)
        report = pcg(A, b, tol=1e-9)
        assert report.converged
        assert np.linalg.norm(b - A @ report.x) / np.linalg.norm(b) <= 1e-9
        assert report.residual_history[-1] == pytest.approx(report.residual)

    def test_energy_is_monotone(self, rng):
        A = laplacian(80)
        report = pcg(A, rng.normal(size=80))
        energies = np.array(report.energy_history)
        assert len(energies) == report.iterations
        assert np.all(np.diff(energies) <= 1e-12 * np.abs(energies[1:]))

    def test_iteration_cap(self, rng):
        report = pcg(laplacian(100), rng.normal(size=100), max_iter=3)
        assert not report.converged
        assert report.iterations == 3
        assert report.residual > 1e-10

    def test_singular_with_nullspace(self, rng):
        n = 40
        A = laplacian(n, neumann=True)
        kernel = np.ones((n, 1)) / np.sqrt(n)
        b = rng.normal(size=n)
        report = pcg(A, b, nullspace=kernel)
        assert report.converged
        assert abs(kernel[:, 0] @ report.x) < 1e-10
        b_perp = b - kernel[:, 0] * (kernel[:, 0] @ b)
        assert np.allclose(A @ report.x, b_perp, atol=1e-8)


class TestSolve:
    def test_cg_on_system(self, small_system):
        assert np.allclose(solve_cg(small_system).x, [1.0 / 11.0, 7.0 / 11.0, 1.0], atol=1e-10)

    def test_direct_on_system(self, small_system):
        report = solve_direct(small_system)
        assert report.method == "direct"
        assert report.converged
        assert np.allclose(report.x, [1.0 / 11.0, 7.0 / 11.0, 1.0], atol=1e-14)

    def test_direct_with_nullspace(self, rng):
        n = 30
        mesh = build_structured(((0, 0, 0), (1, 1, 1)), 9, 1, 1, "hex8")
        dofs = DofMap(mesh, np.arange(10))
        kernel = np.ones((n, 1)) / np.sqrt(n)
        system = SparseSystem(dofs, laplacian(n, neumann=True), rng.normal(size=n))
        direct = solve_direct(system, nullspace=kernel)
        iterative = solve_cg(system, nullspace=kernel)
        assert abs(kernel[:, 0] @ direct.x) < 1e-10
        assert np.allclose(direct.x, iterative.x, atol=1e-7)

    def test_dispatch(self, small_system):
        assert solve(small_system, method="direct").method == "direct"
        assert solve(small_system).method == "cg"
        with pytest.raises(ValueError):
            solve(small_system, method="gmres")

    def test_summary(self, small_system):
        summary = solve(small_system).summary()
        assert set(summary) == {"method", "iterations", "residual", "converged", "elapsed"}


# =============================================================================
# Condition estimate
# =============================================================================


class TestEstimateCondition:
    def test_identity(self):
        estimate = estimate_condition(sp.identity(20, format="csr"))
        assert estimate.kappa == pytest.approx(1.0, abs=1e-12)
        assert not estimate.lower_bound

    def test_two_by_two(self):
        estimate = estimate_condition(sp.diags([1.0, 10.0], format="csr"))
        assert estimate.kappa == pytest.approx(10.0, abs=1e-6)

    def test_known_spectrum(self):
        estimate = estimate_condition(sp.diags(np.arange(1.0, 101.0), format="csr"))
        assert 100.0 / 1.1 <= estimate.kappa <= 100.0 * 1.1
        assert estimate.lambda_min == pytest.approx(1.0, rel=1e-3)

    def test_accepts_system(self, small_system):
        exact = np.linalg.cond(SPD_3x3)
        assert estimate_condition(small_system).kappa == pytest.approx(exact, rel=1e-3)

    def test_failed_inner_solve_is_lower_bound(self):
        estimate = estimate_condition(laplacian(200), iters=50, inner_max_iter=2)
        assert estimate.lower_bound
        assert estimate.kappa_or_inf == float("inf")

    def test_deflated_kernel(self):
        n = 20
        kernel = np.ones((n, 1)) / np.sqrt(n)
        estimate = estimate_condition(laplacian(n, neumann=True), iters=2000, nullspace=kernel)
        eigenvalues = np.linalg.eigvalsh(laplacian(n, neumann=True).toarray())
        assert estimate.lambda_min == pytest.approx(eigenvalues[1], rel=1e-4)

    def test_rectangular(self):
        with pytest.raises(ContractViolation):
            estimate_condition(np.ones((2, 3)))


# =============================================================================
# Reproducibility
# =============================================================================


def clamped_membrane(band):
    """Tilted membrane clamped on its x = 0 side under a uniform in-plane load."""
    clamp = dirichlet_nodes(band, PlaneSelector("x", 0.0), tag="clamp")
    surface = extract_surface(band)
    dofs = DofMap.for_band(band, [clamp])
    system = SparseSystem(dofs)
    assemble_membrane(surface, MembraneMaterial(E=1.0, nu=0.3), dofs, system)
    assemble_stabilization(band, StabilizationParams(1.0), dofs, system)
    assemble_membrane_load(surface, LoadField(surface=lambda x: np.tile([1.0, 0.5, 0.0], (len(x), 1))), dofs, system)
    return apply_dirichlet(system, dofs)


class TestReproducibility:
    @pytest.mark.parametrize("method", ["cg", "direct"])
    def test_repeated_solve_is_bit_identical(self, tilted_band, method):
        first = solve(clamped_membrane(tilted_band), method=method)
        second = solve(clamped_membrane(tilted_band), method=method)
        assert first.converged
        assert np.array_equal(first.x, second.x)
        assert first.iterations == second.iterations

    def test_repeated_assembly_is_bit_identical(self, tilted_band):
        a = clamped_membrane(tilted_band)
        b = clamped_membrane(tilted_band)
        assert (a.matrix != b.matrix).nnz == 0
        assert np.array_equal(a.rhs, b.rhs)

    def test_same_system_solved_twice(self, rng):
        A = laplacian(50)
        b = rng.normal(size=50)
        assert np.array_equal(pcg(A, b).x, pcg(A, b).x)
